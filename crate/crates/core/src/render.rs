//! Differentiable volume rendering through a [`SparseGrid`].
//!
//! The default compositing rule is the emission-absorption (Max) model
//! `C = sum T_i (1 - exp(-sigma_i delta_i)) c_i + T_{N+1} bg` with
//! `T_{i+1} = T_i exp(-sigma_i delta_i)`. The Neural Volumes variant treats
//! each sample's opacity as an absolute fraction of the ray and clips the
//! running sum at one.

use serde::{Deserialize, Serialize};

use crate::camera::{generate_ray, to_ndc, Camera, Ray};
use crate::error::Result;
use crate::grad::GradientBuffer;
use crate::grid::{InterpMode, Row, SparseGrid, Stencil, ROW_LEN};
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::sh::{combine, eval_sh_basis, ViewDir, SH_BASIS_DIM, SH_COEFFS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    #[default]
    Max,
    NeuralVolumes,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions<T> {
    /// Sample spacing as a fraction of the smallest voxel edge.
    pub step_frac: T,
    /// Stop marching once transmittance falls below this; zero disables.
    pub stop_threshold: T,
    pub mode: InterpMode,
    pub formula: Formula,
    pub background: [T; 3],
}

impl<T: Scalar> Default for RenderOptions<T> {
    fn default() -> Self {
        Self {
            step_frac: T::lit(0.5),
            stop_threshold: T::lit(1e-4),
            mode: InterpMode::Trilinear,
            formula: Formula::Max,
            background: [T::one(); 3],
        }
    }
}

/// Uniform sample layout of one ray clipped to the grid bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct March<T> {
    pub t_start: T,
    pub t_end: T,
    pub spacing: T,
    pub count: usize,
    first: T,
}

impl<T: Scalar> March<T> {
    fn none() -> Self {
        Self {
            t_start: T::zero(),
            t_end: T::zero(),
            spacing: T::one(),
            count: 0,
            first: T::zero(),
        }
    }

    /// Parametric position and interval length of sample `i`.
    #[inline]
    pub fn sample(&self, i: usize) -> (T, T) {
        let t = self.first + self.spacing * T::from_usize_lossy(i);
        (t, self.spacing.min(self.t_end - t))
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, T)> + '_ {
        (0..self.count).map(|i| self.sample(i))
    }
}

/// Clips the ray (with unit-normalized direction) to the grid AABB and lays
/// out samples every `step_frac` voxel edges. `offset` in `[0, 1)` shifts the
/// first sample by that fraction of a step.
pub fn march<T: Scalar>(grid: &SparseGrid<T>, origin: crate::vec3::Vec3<T>, unit_dir: crate::vec3::Vec3<T>, step_frac: T, offset: T) -> March<T> {
    let Some((t0, t1)) = grid.aabb().intersect(origin, unit_dir) else {
        return March::none();
    };
    let spacing = step_frac * grid.min_voxel_edge();
    let first = t0 + offset * spacing;
    if !(spacing > T::zero()) || first >= t1 {
        return March::none();
    }
    let count = ((t1 - first) / spacing).ceil().to_usize().unwrap_or(0).max(1);
    // Guard against ceil rounding producing an empty trailing interval.
    let count = if first + spacing * T::from_usize_lossy(count - 1) >= t1 {
        count - 1
    } else {
        count
    };
    March {
        t_start: t0,
        t_end: t1,
        spacing,
        count,
        first,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderResult<T> {
    pub rgb: [T; 3],
    /// Transmittance left after the last sample.
    pub residual: T,
}

/// Per-sample record kept for the backward pass. Samples whose clamped σ is
/// zero contribute nothing in either direction and are not recorded.
#[derive(Clone, Copy, Debug)]
pub struct TraceSample<T> {
    pub t: T,
    pub delta: T,
    pub stencil: Stencil<T>,
    pub sigma: T,
    pub rgb: [T; 3],
    pub live: [bool; 3],
    pub t_before: T,
    pub t_after: T,
}

impl<T: Scalar> TraceSample<T> {
    /// Fraction of the ray this sample contributes.
    #[inline]
    pub fn weight(&self) -> T {
        self.t_before - self.t_after
    }
}

#[derive(Clone, Debug, Default)]
pub struct RayTrace<T> {
    pub samples: Vec<TraceSample<T>>,
    pub basis: [T; SH_BASIS_DIM],
    pub result: Option<RenderResult<T>>,
}

impl<T: Scalar> RayTrace<T> {
    pub fn new() -> Self {
        Self {
            samples: Vec::new(),
            basis: [T::zero(); SH_BASIS_DIM],
            result: None,
        }
    }
}

/// Adjoint inputs for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayUpstream<T> {
    /// dL/dC.
    pub color: [T; 3],
    /// dL/d(residual transmittance).
    pub transmittance: T,
}

impl<T: Scalar> RayUpstream<T> {
    pub fn color(g: [T; 3]) -> Self {
        Self {
            color: g,
            transmittance: T::zero(),
        }
    }
}

/// Forward pass over `ray`, filling `trace` with the active samples.
/// `background` is composited with the residual transmittance.
pub fn trace_ray<T: Scalar>(
    grid: &SparseGrid<T>,
    ray: &Ray<T>,
    opts: &RenderOptions<T>,
    offset: T,
    trace: &mut RayTrace<T>,
) -> RenderResult<T> {
    trace.samples.clear();
    let view = ViewDir::from_unit(ray.view_dir);
    trace.basis = eval_sh_basis(view);
    let len = ray.dir.norm();
    let unit = ray.dir * (T::one() / len);
    let plan = march(grid, ray.origin, unit, opts.step_frac, offset);

    let mut color = [T::zero(); 3];
    let mut trans = T::one();
    // Accumulated absolute opacity for the Neural Volumes rule.
    let mut absorbed = T::zero();
    let mut sh = [T::zero(); SH_COEFFS];
    for (t, delta) in plan.iter() {
        let st = grid.stencil_at(grid.to_lattice(ray.origin + unit * t), opts.mode);
        if st.is_empty() {
            continue;
        }
        let sigma = grid.raw_sigma(&st);
        if !(sigma > T::zero()) {
            continue;
        }
        let decay = (-sigma * delta).exp();
        let t_after = match opts.formula {
            Formula::Max => trans * decay,
            Formula::NeuralVolumes => {
                absorbed += T::one() - decay;
                (T::one() - absorbed).relu()
            }
        };
        grid.interp_sh(&st, &mut sh);
        let (rgb, live) = combine(&trace.basis, &sh);
        let w = trans - t_after;
        for ch in 0..3 {
            color[ch] += w * rgb[ch];
        }
        trace.samples.push(TraceSample {
            t,
            delta,
            stencil: st,
            sigma,
            rgb,
            live,
            t_before: trans,
            t_after,
        });
        trans = t_after;
        if trans <= opts.stop_threshold {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += trans * opts.background[ch];
    }
    let res = RenderResult {
        rgb: color,
        residual: trans,
    };
    trace.result = Some(res);
    res
}

/// Renders one ray with the configured formula.
pub fn render_ray<T: Scalar>(grid: &SparseGrid<T>, ray: &Ray<T>, opts: &RenderOptions<T>) -> RenderResult<T> {
    let mut trace = RayTrace::new();
    trace_ray(grid, ray, opts, T::zero(), &mut trace)
}

/// Max-formula render.
pub fn render_ray_max<T: Scalar>(grid: &SparseGrid<T>, ray: &Ray<T>, opts: &RenderOptions<T>) -> RenderResult<T> {
    render_ray(grid, ray, &RenderOptions { formula: Formula::Max, ..*opts })
}

/// Neural Volumes render.
pub fn render_ray_nv<T: Scalar>(grid: &SparseGrid<T>, ray: &Ray<T>, opts: &RenderOptions<T>) -> RenderResult<T> {
    render_ray(grid, ray, &RenderOptions { formula: Formula::NeuralVolumes, ..*opts })
}

/// Analytic backward pass for a traced ray.
///
/// `sigma_extra[i]`, when given, is an additional dL/dσ for trace sample `i`
/// (for example from a sparsity prior) and is chained through the same stencil.
pub fn backward_ray<T: Scalar>(
    trace: &RayTrace<T>,
    opts: &RenderOptions<T>,
    upstream: &RayUpstream<T>,
    sigma_extra: Option<&[T]>,
    grads: &mut GradientBuffer<T>,
) {
    let Some(res) = trace.result else { return };
    let g = upstream.color;
    let dot = |c: &[T; 3]| g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
    let n = trace.samples.len();
    if let Some(extra) = sigma_extra {
        assert_eq!(extra.len(), n, "sigma_extra must align with trace samples");
    }
    let bg_term = dot(&opts.background);
    let mut up: Row<T> = [T::zero(); ROW_LEN];

    match opts.formula {
        Formula::Max => {
            // suffix = sum_{j>i} w_j (g . c_j) + T_{N+1} (g . bg)
            let mut suffix = res.residual * bg_term;
            for (i, s) in trace.samples.iter().enumerate().rev() {
                let gc = dot(&s.rgb);
                let mut d_sigma = s.delta * (s.t_after * gc - suffix)
                    - upstream.transmittance * s.delta * res.residual;
                if let Some(extra) = sigma_extra {
                    d_sigma += extra[i];
                }
                let w = s.weight();
                suffix += w * gc;
                scatter(s, &trace.basis, d_sigma, w, &g, &mut up, grads);
            }
        }
        Formula::NeuralVolumes => {
            // T_k = max(0, 1 - A_k); dC/dalpha_k = -sum_{i>k, T_i unclamped} coef_i
            // with coef_i = c_i - c_{i-1} and coef_{N+1} = bg - c_N.
            let live_after = |s: &TraceSample<T>| s.t_after > T::zero();
            let mut suffix = T::zero();
            if let Some(last) = trace.samples.last() {
                if live_after(last) {
                    suffix = bg_term - dot(&last.rgb) + upstream.transmittance;
                }
            }
            for i in (0..n).rev() {
                let s = &trace.samples[i];
                let d_alpha = -suffix;
                let mut d_sigma = d_alpha * s.delta * (-s.sigma * s.delta).exp();
                if let Some(extra) = sigma_extra {
                    d_sigma += extra[i];
                }
                // T_i for i >= 2 is live when it is positive.
                if i > 0 && s.t_before > T::zero() {
                    suffix += dot(&s.rgb) - dot(&trace.samples[i - 1].rgb);
                }
                let w = s.weight();
                scatter(s, &trace.basis, d_sigma, w, &g, &mut up, grads);
            }
        }
    }
}

#[inline]
fn scatter<T: Scalar>(
    s: &TraceSample<T>,
    basis: &[T; SH_BASIS_DIM],
    d_sigma: T,
    w: T,
    g: &[T; 3],
    up: &mut Row<T>,
    grads: &mut GradientBuffer<T>,
) {
    up[0] = d_sigma;
    for ch in 0..3 {
        let scale = if s.live[ch] { w * g[ch] } else { T::zero() };
        let dst = &mut up[1 + ch * SH_BASIS_DIM..1 + (ch + 1) * SH_BASIS_DIM];
        for (d, &b) in dst.iter_mut().zip(basis) {
            *d = scale * b;
        }
    }
    for (r, wt) in s.stencil.entries() {
        grads.add_scaled(r, wt, up);
    }
}

/// Renders `ray` and backpropagates `upstream` in one call.
pub fn render_ray_backward<T: Scalar>(
    grid: &SparseGrid<T>,
    ray: &Ray<T>,
    opts: &RenderOptions<T>,
    upstream: &RayUpstream<T>,
    grads: &mut GradientBuffer<T>,
) -> RenderResult<T> {
    let mut trace = RayTrace::new();
    let res = trace_ray(grid, ray, opts, T::zero(), &mut trace);
    backward_ray(&trace, opts, upstream, None, grads);
    res
}

/// Per-row maximum of the sample weight over all `rays`, attributing each
/// sample to every occupied row in its stencil with nonzero interpolation weight.
pub fn max_weight_accumulate<T: Scalar>(
    grid: &SparseGrid<T>,
    rays: impl IntoIterator<Item = Ray<T>>,
    opts: &RenderOptions<T>,
) -> Vec<T> {
    let mut out = vec![T::zero(); grid.row_count()];
    let mut trace = RayTrace::new();
    for ray in rays {
        trace_ray(grid, &ray, opts, T::zero(), &mut trace);
        accumulate_max_weights(&trace, &mut out);
    }
    out
}

pub(crate) fn accumulate_max_weights<T: Scalar>(trace: &RayTrace<T>, out: &mut [T]) {
    for s in &trace.samples {
        let w = s.weight();
        for (r, wt) in s.stencil.entries() {
            if wt > T::zero() && w > out[r] {
                out[r] = w;
            }
        }
    }
}

/// Ray for pixel `(x, y)`, warped to NDC when `ndc` is given.
pub fn camera_ray<T: Scalar>(cam: &Camera<T>, x: u32, y: u32, ndc: Option<&Camera<T>>) -> Result<Ray<T>> {
    let r = generate_ray(cam, x, y)?;
    match ndc {
        Some(ref_cam) => to_ndc(&r, ref_cam),
        None => Ok(r),
    }
}

/// Renders a full image from `cam`.
pub fn render_image<T: Scalar>(
    grid: &SparseGrid<T>,
    cam: &Camera<T>,
    opts: &RenderOptions<T>,
    ndc: Option<&Camera<T>>,
) -> Result<Image<T>> {
    let mut img = Image::new(cam.width, cam.height);
    let mut trace = RayTrace::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = camera_ray(cam, x, y, ndc)?;
            let r = trace_ray(grid, &ray, opts, T::zero(), &mut trace);
            img.set(x, y, r.rgb);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Aabb;
    use crate::sh::SH_C0;
    use crate::vec3::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb<f64> {
        Aabb::new(Vec3::zero(), Vec3::splat(1.0))
    }

    fn exact_opts() -> RenderOptions<f64> {
        RenderOptions {
            stop_threshold: 0.0,
            background: [0.3, 0.6, 0.9],
            ..Default::default()
        }
    }

    fn dc_row(sigma: f64, rgb: [f64; 3]) -> Row<f64> {
        let mut r = [0.0; ROW_LEN];
        r[0] = sigma;
        for ch in 0..3 {
            r[1 + ch * 9] = rgb[ch] / SH_C0;
        }
        r
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> SparseGrid<f64> {
        SparseGrid::from_fn([n, n, n], unit_box(), |_, _| {
            rng.gen_bool(0.85).then(|| {
                let mut r = [0.0; ROW_LEN];
                r[0] = rng.gen_range(0.5..8.0);
                for ch in 0..3 {
                    r[1 + ch * 9] = rng.gen_range(1.0..3.0);
                    for k in 1..9 {
                        r[1 + ch * 9 + k] = rng.gen_range(-0.2..0.2);
                    }
                }
                r
            })
        })
        .unwrap()
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray<f64> {
        loop {
            let o = Vec3::new(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0));
            let target = Vec3::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            let d = target - o;
            if d.norm() > 0.1 {
                return Ray::new(o, d);
            }
        }
    }

    #[test]
    fn march_misses_and_spacing() {
        let g = SparseGrid::<f64>::empty([4, 4, 4], unit_box()).unwrap();
        let miss = march(&g, Vec3::new(2.0, 2.0, 2.0), Vec3::new(1.0, 0.0, 0.0), 0.5, 0.0);
        assert_eq!(miss.count, 0);
        let m = march(&g, Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0), 0.5, 0.0);
        assert!((m.spacing - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(m.count, 6);
    }

    #[test]
    fn deltas_sum_to_chord() {
        let g = SparseGrid::<f64>::empty([7, 5, 6], unit_box()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let r = random_ray(&mut rng);
            let (t0, t1) = g.aabb().intersect(r.origin, r.dir).unwrap();
            let m = march(&g, r.origin, r.dir, rng.gen_range(0.05..2.0), 0.0);
            let sum: f64 = m.iter().map(|(_, d)| d).sum();
            assert!((sum - (t1 - t0)).abs() < 1e-6);
            assert!(m.iter().all(|(_, d)| d > 0.0));
        }
    }

    #[test]
    fn empty_space_shows_background() {
        let g = SparseGrid::dense([3, 3, 3], unit_box(), dc_row(0.0, [0.5; 3])).unwrap();
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0));
        for f in [Formula::Max, Formula::NeuralVolumes] {
            let out = render_ray(&g, &r, &RenderOptions { formula: f, ..exact_opts() });
            assert_eq!(out.rgb, [0.3, 0.6, 0.9]);
            assert_eq!(out.residual, 1.0);
        }
    }

    #[test]
    fn homogeneous_medium_closed_form() {
        let (c, k) = (2.5, [0.2, 0.5, 0.7]);
        let g = SparseGrid::dense([5, 5, 5], unit_box(), dc_row(c, k)).unwrap();
        let opts = RenderOptions {
            step_frac: 1.0 / 64.0,
            background: [0.0; 3],
            stop_threshold: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let r = random_ray(&mut rng);
            let (t0, t1) = g.aabb().intersect(r.origin, r.dir).unwrap();
            let out = render_ray_max(&g, &r, &opts);
            for ch in 0..3 {
                let want = k[ch] * (1.0 - (-c * (t1 - t0)).exp());
                assert!((out.rgb[ch] - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn opaque_front_sample() {
        let g = SparseGrid::dense([3, 3, 3], unit_box(), dc_row(80.0, [0.1, 0.4, 0.8])).unwrap();
        // spacing 0.25, sigma*delta = 20
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0));
        let out = render_ray_max(&g, &r, &exact_opts());
        for (ch, v) in [0.1, 0.4, 0.8].into_iter().enumerate() {
            assert!((out.rgb[ch] - v).abs() < 2.0 * (-20f64).exp());
        }
    }

    #[test]
    fn nv_single_sample_matches_max_and_clips_second() {
        let a = 0.7f64;
        let sigma = -(1.0 - a).ln() / 0.5;
        let c0 = [0.2, 0.4, 0.6];
        let c1 = [0.8, 0.2, 0.4];
        let g = SparseGrid::from_fn([2, 2, 2], unit_box(), |[i, _, _], _| {
            Some(dc_row(sigma, if i == 0 { c0 } else { c1 }))
        })
        .unwrap();
        let opts = RenderOptions {
            step_frac: 0.5,
            background: [0.0; 3],
            stop_threshold: 0.0,
            ..Default::default()
        };
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0));
        let nv = render_ray_nv(&g, &r, &opts);
        let mid: Vec<f64> = (0..3).map(|ch| 0.5 * (c0[ch] + c1[ch])).collect();
        for ch in 0..3 {
            assert!((nv.rgb[ch] - (0.7 * c0[ch] + 0.3 * mid[ch])).abs() < 1e-12);
        }
        assert_eq!(nv.residual, 0.0);
        let max = render_ray_max(&g, &r, &opts);
        assert!((max.rgb[0] - nv.rgb[0]).abs() > 1e-3);

        // A single sample: both rules coincide.
        let one = RenderOptions { step_frac: 1.0, ..opts };
        let nv = render_ray_nv(&g, &r, &one);
        let mx = render_ray_max(&g, &r, &one);
        for ch in 0..3 {
            assert!((nv.rgb[ch] - mx.rgb[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn max_weights_and_residual_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, 6);
        let mut trace = RayTrace::new();
        for _ in 0..2000 {
            let r = random_ray(&mut rng);
            let res = trace_ray(&g, &r, &exact_opts(), 0.0, &mut trace);
            let w: f64 = trace.samples.iter().map(|s| s.weight()).sum();
            assert!(trace.samples.iter().all(|s| s.weight() >= 0.0));
            assert!((w + res.residual - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn early_termination_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 6);
        let early = RenderOptions {
            stop_threshold: 1e-4,
            ..exact_opts()
        };
        for _ in 0..500 {
            let r = random_ray(&mut rng);
            let a = render_ray(&g, &r, &exact_opts());
            let b = render_ray(&g, &r, &early);
            for ch in 0..3 {
                assert!((a.rgb[ch] - b.rgb[ch]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn step_refinement_is_cauchy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 5);
        let r = Ray::new(Vec3::new(-0.5, 0.3, 0.2), Vec3::new(1.0, 0.4, 0.5));
        let c = |sf: f64| {
            render_ray_max(&g, &r, &RenderOptions { step_frac: sf, ..exact_opts() }).rgb
        };
        let (a, b, d) = (c(0.4), c(0.2), c(0.1));
        let d1: f64 = (0..3).map(|i| (a[i] - b[i]).abs()).sum();
        let d2: f64 = (0..3).map(|i| (b[i] - d[i]).abs()).sum();
        assert!(d2 < d1, "{d2} !< {d1}");
    }

    #[test]
    fn single_sample_sigma_gradient_closed_form() {
        let (sigma, c, b) = (1.3, [0.25, 0.5, 0.75], [0.9, 0.1, 0.4]);
        let g = SparseGrid::dense([2, 2, 2], unit_box(), dc_row(sigma, c)).unwrap();
        let opts = RenderOptions {
            step_frac: 1.0,
            stop_threshold: 0.0,
            background: b,
            ..Default::default()
        };
        let r = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0));
        for ch in 0..3 {
            let mut up = [0.0; 3];
            up[ch] = 1.0;
            let mut gb = GradientBuffer::new(g.row_count());
            render_ray_backward(&g, &r, &opts, &RayUpstream::color(up), &mut gb);
            // Sample sits on the x = 0 face: four rows at weight 1/4.
            let want = (-sigma).exp() * (c[ch] - b[ch]) * 0.25;
            let row = g.cell([0, 1, 1]).unwrap();
            assert!((gb.row(row)[0] - want).abs() < 1e-12);
            assert_eq!(gb.row(g.cell([1, 1, 1]).unwrap())[0], 0.0);
        }
    }

    #[test]
    fn zero_color_grid_has_no_gradient() {
        let g = SparseGrid::dense([3, 3, 3], unit_box(), dc_row(0.0, [0.0; 3])).unwrap();
        let mut gb = GradientBuffer::new(g.row_count());
        let r = Ray::new(Vec3::new(-1.0, 0.4, 0.6), Vec3::new(1.0, 0.1, 0.0));
        render_ray_backward(&g, &r, &exact_opts(), &RayUpstream::color([1.0; 3]), &mut gb);
        assert_eq!(gb.nonzero_fraction(), 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_grid(&mut rng, 5);
        let r = random_ray(&mut rng);
        let up = RayUpstream {
            color: [0.3, -0.2, 0.5],
            transmittance: 0.1,
        };
        let up2 = RayUpstream {
            color: up.color.map(|v| 2.5 * v),
            transmittance: 0.25,
        };
        let mut a = GradientBuffer::new(g.row_count());
        let mut b = GradientBuffer::new(g.row_count());
        render_ray_backward(&g, &r, &exact_opts(), &up, &mut a);
        render_ray_backward(&g, &r, &exact_opts(), &up2, &mut b);
        for row in 0..g.row_count() {
            for k in 0..ROW_LEN {
                assert!((2.5 * a.row(row)[k] - b.row(row)[k]).abs() < 1e-12);
            }
        }
    }

    fn check_fd(formula: Formula, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&mut rng, 4);
        let opts = RenderOptions {
            formula,
            step_frac: 0.37,
            ..exact_opts()
        };
        let r = random_ray(&mut rng);
        let up = RayUpstream {
            color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            transmittance: rng.gen_range(-1.0..1.0),
        };
        let loss = |g: &SparseGrid<f64>| {
            let o = render_ray(g, &r, &opts);
            (0..3).map(|c| up.color[c] * o.rgb[c]).sum::<f64>() + up.transmittance * o.residual
        };
        let mut gb = GradientBuffer::new(g.row_count());
        render_ray_backward(&g, &r, &opts, &up, &mut gb);
        let h = 1e-5;
        for row in 0..g.row_count() {
            for k in 0..ROW_LEN {
                let mut p = g.clone();
                p.rows_mut()[row][k] += h;
                let mut m = g.clone();
                m.rows_mut()[row][k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let a = gb.row(row)[k];
                assert!(
                    (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-7,
                    "{formula:?} row {row} k {k}: fd {fd} vs {a}"
                );
            }
        }
    }

    #[test]
    fn max_backward_matches_finite_differences() {
        for seed in 10..15 {
            check_fd(Formula::Max, seed);
        }
    }

    #[test]
    fn nv_backward_matches_finite_differences() {
        // Low opacity keeps the running sum away from the clip at one.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut g = random_grid(&mut rng, 4);
        for r in g.rows_mut() {
            r[0] *= 0.1;
        }
        let opts = RenderOptions {
            formula: Formula::NeuralVolumes,
            ..exact_opts()
        };
        for _ in 0..5 {
            let r = random_ray(&mut rng);
            let up = RayUpstream {
                color: [0.4, -0.7, 0.2],
                transmittance: 0.3,
            };
            let loss = |g: &SparseGrid<f64>| {
                let o = render_ray(g, &r, &opts);
                (0..3).map(|c| up.color[c] * o.rgb[c]).sum::<f64>() + up.transmittance * o.residual
            };
            let mut gb = GradientBuffer::new(g.row_count());
            render_ray_backward(&g, &r, &opts, &up, &mut gb);
            let h = 1e-5;
            for row in 0..g.row_count() {
                for k in [0, 1, 5, 10, 27] {
                    let mut p = g.clone();
                    p.rows_mut()[row][k] += h;
                    let mut m = g.clone();
                    m.rows_mut()[row][k] -= h;
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let a = gb.row(row)[k];
                    assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-7, "row {row} k {k}: {fd} vs {a}");
                }
            }
        }
        check_fd(Formula::NeuralVolumes, 21);
    }

    #[test]
    fn max_weight_examples() {
        let g = SparseGrid::dense([3, 3, 3], unit_box(), dc_row(0.0, [0.5; 3])).unwrap();
        let rays = vec![Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0))];
        let w = max_weight_accumulate(&g, rays, &exact_opts());
        assert!(w.iter().all(|&v| v == 0.0));

        // One occupied lattice point hit dead-on by two rays.
        let mut g = SparseGrid::<f64>::empty([5, 5, 5], unit_box()).unwrap();
        let mut rows = vec![dc_row(40.0, [0.5; 3])];
        let mut idx = g.index().to_vec();
        idx[g.linear([2, 2, 2])] = 0;
        g = SparseGrid::from_parts([5, 5, 5], unit_box(), idx, std::mem::take(&mut rows)).unwrap();
        let opts = RenderOptions { step_frac: 1.0, ..exact_opts() };
        let a = Ray::new(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(1.0, 0.0, 0.0));
        let wa = max_weight_accumulate(&g, vec![a], &opts)[0];
        // The ray crosses the node at t = 1.5 with delta = 0.25: the only nonzero sample.
        assert!((wa - (1.0 - (-40.0f64 * 0.25).exp())).abs() < 1e-12);
        let b = Ray::new(Vec3::new(0.5, 0.5, -1.0), Vec3::new(0.1, 0.0, 1.0));
        let wb = max_weight_accumulate(&g, vec![b], &opts)[0];
        let both = max_weight_accumulate(&g, vec![a, b], &opts)[0];
        assert_eq!(both, wa.max(wb));
    }
}
