//! Multi-sphere background for unbounded scenes.
//!
//! Concentric equirectangular layers placed uniformly in inverse radius from
//! `1/r = 1` down to `1/r = 0`. Each texel stores an opacity and a
//! view-independent RGB color. Values are trilinear in
//! (layer, polar angle, azimuth), with the azimuth wrapping around.

use crate::error::{Error, Result};
use crate::grid::SparseGrid;
use crate::optim::{update_scalar, OptimMethod};
use crate::render::{backward_ray, trace_ray, RayTrace, RayUpstream, RenderOptions};
use crate::camera::Ray;
use crate::grad::GradientBuffer;
use crate::losses::TvValue;
use crate::scalar::Scalar;
use crate::vec3::Vec3;

/// Texel payload: `[sigma, r, g, b]`.
pub type Texel<T> = [T; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct MsiBackground<T> {
    n_layers: usize,
    width: usize,
    height: usize,
    radii: Vec<T>,
    data: Vec<Texel<T>>,
}

/// Interpolation footprint of one background lookup.
#[derive(Clone, Copy, Debug, Default)]
pub struct BgStencil<T> {
    pub texels: [u32; 8],
    pub weights: [T; 8],
    pub len: u8,
}

impl<T: Scalar> BgStencil<T> {
    pub fn entries(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        (0..self.len as usize).map(move |i| (self.texels[i] as usize, self.weights[i]))
    }
}

/// Inverse radii `1 - k/(n-1)` for `k = 0..n`.
pub fn layer_inverse_radii<T: Scalar>(n_layers: usize) -> Vec<T> {
    let last = T::from_usize_lossy(n_layers - 1);
    (0..n_layers)
        .map(|k| T::one() - T::from_usize_lossy(k) / last)
        .collect()
}

impl<T: Scalar> MsiBackground<T> {
    pub fn new(n_layers: usize, width: usize, height: usize, init: Texel<T>) -> Result<Self> {
        Self::check_shape(n_layers, width, height)?;
        let cells = n_layers * width * height;
        let mut data = Vec::new();
        data.try_reserve_exact(cells).map_err(|_| Error::Resource {
            dims: [n_layers, height, width],
            cells,
        })?;
        data.resize(cells, init);
        let radii = layer_inverse_radii::<T>(n_layers)
            .into_iter()
            .map(|s| if s > T::zero() { T::one() / s } else { T::infinity() })
            .collect();
        Ok(Self {
            n_layers,
            width,
            height,
            radii,
            data,
        })
    }

    /// Rebuilds a background from stored parts, validating the layer radii.
    pub fn from_parts(n_layers: usize, width: usize, height: usize, radii: Vec<T>, data: Vec<Texel<T>>) -> Result<Self> {
        Self::check_shape(n_layers, width, height)?;
        if radii.len() != n_layers {
            return Err(Error::Invalid(format!("{} radii for {n_layers} layers", radii.len())));
        }
        if data.len() != n_layers * width * height {
            return Err(Error::Invalid(format!(
                "background holds {} texels, expected {}",
                data.len(),
                n_layers * width * height
            )));
        }
        let want = layer_inverse_radii::<T>(n_layers);
        for (k, (&r, &s)) in radii.iter().zip(&want).enumerate() {
            let inv = if r.is_infinite() { T::zero() } else { T::one() / r };
            if (inv - s).abs() > T::lit(1e-5) {
                return Err(Error::Invalid(format!("layer {k} radius {r} is off the inverse-radius ladder")));
            }
        }
        Ok(Self {
            n_layers,
            width,
            height,
            radii,
            data,
        })
    }

    fn check_shape(n_layers: usize, width: usize, height: usize) -> Result<()> {
        if n_layers < 2 || n_layers > u16::MAX as usize || width < 1 || height < 1 {
            return Err(Error::Invalid(format!(
                "background shape {n_layers} layers of {width}x{height} is unsupported"
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radii(&self) -> &[T] {
        &self.radii
    }

    pub fn data(&self) -> &[Texel<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Texel<T>] {
        &mut self.data
    }

    pub fn texel_count(&self) -> usize {
        self.data.len()
    }

    /// Texel id of `(layer, row v, column u)`.
    pub fn texel(&self, layer: usize, v: usize, u: usize) -> usize {
        (layer * self.height + v) * self.width + u
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> MsiBackground<U> {
        MsiBackground {
            n_layers: self.n_layers,
            width: self.width,
            height: self.height,
            radii: self.radii.iter().map(|&r| U::lit(r.as_f64())).collect(),
            data: self.data.iter().map(|t| t.map(|v| U::lit(v.as_f64()))).collect(),
        }
    }

    /// Continuous layer coordinate of inverse radius `s`.
    pub fn layer_coord(&self, s: T) -> T {
        let c = (T::one() - s) * T::from_usize_lossy(self.n_layers - 1);
        c.max(T::zero()).min(T::from_usize_lossy(self.n_layers - 1))
    }

    /// Stencil at layer coordinate `layer` along unit direction `dir`.
    pub fn stencil(&self, layer: T, dir: Vec3<T>) -> BgStencil<T> {
        let (w, h) = (self.width, self.height);
        let theta = dir.z.max(-T::one()).min(T::one()).acos();
        let phi = dir.y.atan2(dir.x);
        let pi = T::PI();
        let u = (phi + pi) / (pi + pi) * T::from_usize_lossy(w) - T::lit(0.5);
        let v = (theta / pi * T::from_usize_lossy(h) - T::lit(0.5))
            .max(T::zero())
            .min(T::from_usize_lossy(h - 1));

        let u0f = u.floor();
        let fu = u - u0f;
        let wrap = |i: i64| i.rem_euclid(w as i64) as usize;
        let u0 = wrap(u0f.to_i64().unwrap_or(0));
        let u1 = (u0 + 1) % w;
        let v0 = (v.floor().to_usize().unwrap_or(0)).min(h - 1);
        let fv = v - T::from_usize_lossy(v0);
        let v1 = (v0 + 1).min(h - 1);
        let l0 = (layer.floor().to_usize().unwrap_or(0)).min(self.n_layers - 1);
        let fl = layer - T::from_usize_lossy(l0);
        let l1 = (l0 + 1).min(self.n_layers - 1);

        let mut st = BgStencil::default();
        for (l, wl) in [(l0, T::one() - fl), (l1, fl)] {
            for (vv, wv) in [(v0, T::one() - fv), (v1, fv)] {
                for (uu, wu) in [(u0, T::one() - fu), (u1, fu)] {
                    let wt = wl * wv * wu;
                    if wt == T::zero() {
                        continue;
                    }
                    let id = self.texel(l, vv, uu) as u32;
                    let slot = st.texels[..st.len as usize].iter().position(|&t| t == id);
                    match slot {
                        Some(i) => st.weights[i] += wt,
                        None => {
                            st.texels[st.len as usize] = id;
                            st.weights[st.len as usize] = wt;
                            st.len += 1;
                        }
                    }
                }
            }
        }
        st
    }

    /// Raw interpolated texel (opacity not yet clamped).
    pub fn interp(&self, st: &BgStencil<T>) -> Texel<T> {
        let mut out = [T::zero(); 4];
        for (id, wt) in st.entries() {
            let t = &self.data[id];
            for k in 0..4 {
                out[k] += wt * t[k];
            }
        }
        out
    }

    /// Opacity and color at an exterior world point.
    pub fn sample_background(&self, p: Vec3<T>) -> Result<(T, [T; 3])> {
        let r = p.norm();
        if !(r >= T::one()) {
            return Err(Error::Contract(format!("background lookup at radius {r} inside the unit sphere")));
        }
        let st = self.stencil(self.layer_coord(T::one() / r), p * (T::one() / r));
        let t = self.interp(&st);
        Ok((t[0].relu(), [t[1].relu(), t[2].relu(), t[3].relu()]))
    }
}

/// Distance along a unit ray to where it leaves the sphere of radius `r`.
fn sphere_exit<T: Scalar>(o: Vec3<T>, d: Vec3<T>, r: T) -> T {
    if r.is_infinite() {
        return T::infinity();
    }
    let b = o.dot(d);
    let c = o.dot(o) - r * r;
    let disc = (b * b - c).max(T::zero());
    -b + disc.sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct BgSample<T> {
    pub stencil: BgStencil<T>,
    /// Path length through the layer's shell; infinite for the outermost layer.
    pub delta: T,
    pub sigma: T,
    pub rgb: [T; 3],
    pub live: [bool; 3],
    pub t_before: T,
    pub t_after: T,
}

impl<T: Scalar> BgSample<T> {
    pub fn weight(&self) -> T {
        self.t_before - self.t_after
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeResult<T> {
    pub rgb: [T; 3],
    /// Transmittance left after the background, composited over black.
    pub residual: T,
    /// Transmittance left after the foreground grid.
    pub t_fg: T,
}

#[derive(Clone, Debug, Default)]
pub struct CompositeTrace<T> {
    pub fg: RayTrace<T>,
    pub bg: Vec<BgSample<T>>,
    /// Background color before scaling by the foreground transmittance.
    pub bg_rgb: [T; 3],
    /// Background transmittance before scaling.
    pub bg_residual: T,
    pub result: Option<CompositeResult<T>>,
}

impl<T: Scalar> CompositeTrace<T> {
    pub fn new() -> Self {
        Self {
            fg: RayTrace::new(),
            bg: Vec::new(),
            bg_rgb: [T::zero(); 3],
            bg_residual: T::one(),
            result: None,
        }
    }
}

/// Upstream derivatives of a composited ray.
#[derive(Clone, Copy, Debug)]
pub struct CompositeUpstream<T> {
    pub color: [T; 3],
    pub residual: T,
    pub t_fg: T,
}

/// Forward pass through the foreground grid and then the background layers.
///
/// The ray origin must lie inside the unit sphere. Each layer gets one sample
/// where the ray crosses it; its interval is the stretch of ray between the
/// inverse-radius midpoints on either side of the layer.
pub fn trace_ray_with_background<T: Scalar>(
    grid: &SparseGrid<T>,
    bg: &MsiBackground<T>,
    ray: &Ray<T>,
    opts: &RenderOptions<T>,
    offset: T,
    trace: &mut CompositeTrace<T>,
) -> Result<CompositeResult<T>> {
    if !(ray.origin.norm() < T::one()) {
        return Err(Error::Contract("background rays must start inside the unit sphere".into()));
    }
    let fg_opts = RenderOptions {
        background: [T::zero(); 3],
        ..*opts
    };
    let fg = trace_ray(grid, ray, &fg_opts, offset, &mut trace.fg);
    let t_fg = fg.residual;

    trace.bg.clear();
    let unit = ray.dir * (T::one() / ray.dir.norm());
    let inv = layer_inverse_radii::<T>(bg.n_layers);
    let half = T::lit(0.5) / T::from_usize_lossy(bg.n_layers - 1);
    let bound = |s: T| {
        if s > T::zero() {
            sphere_exit(ray.origin, unit, T::one() / s)
        } else {
            T::infinity()
        }
    };
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    for (k, &s) in inv.iter().enumerate() {
        let t_in = bound((s + half).min(T::one()));
        let t_out = bound((s - half).max(T::zero()));
        let delta = t_out - t_in;
        let st = bg.stencil(T::from_usize_lossy(k), direction_at(ray.origin, unit, bg.radii[k]));
        let raw = bg.interp(&st);
        let sigma = raw[0];
        if !(sigma > T::zero()) || !(delta > T::zero()) {
            continue;
        }
        let decay = if delta.is_infinite() { T::zero() } else { (-sigma * delta).exp() };
        let t_after = trans * decay;
        let rgb = [raw[1].relu(), raw[2].relu(), raw[3].relu()];
        let live = [raw[1] > T::zero(), raw[2] > T::zero(), raw[3] > T::zero()];
        let w = trans - t_after;
        for ch in 0..3 {
            color[ch] += w * rgb[ch];
        }
        trace.bg.push(BgSample {
            stencil: st,
            delta,
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
    trace.bg_rgb = color;
    trace.bg_residual = trans;
    let res = CompositeResult {
        rgb: std::array::from_fn(|ch| fg.rgb[ch] + t_fg * color[ch]),
        residual: t_fg * trans,
        t_fg,
    };
    trace.result = Some(res);
    Ok(res)
}

/// Unit direction from the origin to where the ray meets radius `r`.
fn direction_at<T: Scalar>(o: Vec3<T>, d: Vec3<T>, r: T) -> Vec3<T> {
    if r.is_infinite() {
        return d;
    }
    let p = o + d * sphere_exit(o, d, r);
    p * (T::one() / p.norm())
}

pub fn render_ray_with_background<T: Scalar>(
    grid: &SparseGrid<T>,
    bg: &MsiBackground<T>,
    ray: &Ray<T>,
    opts: &RenderOptions<T>,
) -> Result<CompositeResult<T>> {
    trace_ray_with_background(grid, bg, ray, opts, T::zero(), &mut CompositeTrace::new())
}

/// Sparse gradient accumulator over background texels.
#[derive(Clone, Debug)]
pub struct BgGradients<T> {
    data: Vec<Texel<T>>,
    touched: Vec<bool>,
    list: Vec<u32>,
}

impl<T: Scalar> BgGradients<T> {
    pub fn new(texels: usize) -> Self {
        Self {
            data: vec![[T::zero(); 4]; texels],
            touched: vec![false; texels],
            list: Vec::new(),
        }
    }

    pub fn add(&mut self, texel: usize, k: usize, g: T) {
        if !self.touched[texel] {
            self.touched[texel] = true;
            self.list.push(texel as u32);
        }
        self.data[texel][k] += g;
    }

    pub fn get(&self, texel: usize) -> &Texel<T> {
        &self.data[texel]
    }

    pub fn touched(&self) -> &[u32] {
        &self.list
    }

    pub fn merge(&mut self, other: &BgGradients<T>) {
        for &t in &other.list {
            for k in 0..4 {
                self.add(t as usize, k, other.data[t as usize][k]);
            }
        }
    }

    pub fn clear(&mut self) {
        for &t in &self.list {
            self.data[t as usize] = [T::zero(); 4];
            self.touched[t as usize] = false;
        }
        self.list.clear();
    }
}

/// Backward pass matching [`trace_ray_with_background`].
pub fn backward_ray_with_background<T: Scalar>(
    trace: &CompositeTrace<T>,
    opts: &RenderOptions<T>,
    upstream: &CompositeUpstream<T>,
    sigma_extra: Option<&[T]>,
    grads: &mut GradientBuffer<T>,
    bg_grads: &mut BgGradients<T>,
) {
    let Some(res) = trace.result else { return };
    let g = upstream.color;
    let dot = |c: &[T; 3]| g[0] * c[0] + g[1] * c[1] + g[2] * c[2];

    // Foreground sees the background as a residual-weighted constant.
    let fg_opts = RenderOptions {
        background: [T::zero(); 3],
        ..*opts
    };
    let fg_up = RayUpstream {
        color: g,
        transmittance: dot(&trace.bg_rgb) + upstream.residual * trace.bg_residual + upstream.t_fg,
    };
    backward_ray(&trace.fg, &fg_opts, &fg_up, sigma_extra, grads);

    // Background: a Max composite over black, scaled by t_fg.
    let scale = res.t_fg;
    let gt = upstream.residual * scale;
    let mut suffix = T::zero();
    for s in trace.bg.iter().rev() {
        let gc = scale * dot(&s.rgb);
        let d_sigma = if s.delta.is_infinite() {
            T::zero()
        } else {
            s.delta * (s.t_after * gc - suffix) - gt * s.delta * trace.bg_residual
        };
        let w = s.weight();
        suffix += w * gc;
        for (id, wt) in s.stencil.entries() {
            if d_sigma != T::zero() {
                bg_grads.add(id, 0, wt * d_sigma);
            }
            for ch in 0..3 {
                if s.live[ch] {
                    bg_grads.add(id, 1 + ch, wt * w * scale * g[ch]);
                }
            }
        }
    }
}

/// Total variation over background texels with azimuthal wrap-around.
///
/// Differences are taken to the next texel in azimuth (wrapping), polar
/// angle and layer; at the polar and radial edges the difference is zero.
pub fn bg_tv_loss<T: Scalar>(
    bg: &MsiBackground<T>,
    texels: &[usize],
    w_sigma: T,
    w_color: T,
    eps: T,
    mut grads: Option<&mut BgGradients<T>>,
) -> TvValue<T> {
    let mut out = TvValue::default();
    if texels.is_empty() {
        return out;
    }
    let (w, h, n) = (bg.width, bg.height, bg.n_layers);
    let scale = [w, h, n].map(|d| T::from_usize_lossy(d) / T::lit(256.0));
    let inv_n = T::one() / T::from_usize_lossy(texels.len());
    let eps2 = eps * eps;
    for &id in texels {
        let u = id % w;
        let v = (id / w) % h;
        let l = id / (w * h);
        let neigh = [
            Some(bg.texel(l, v, (u + 1) % w)).filter(|&x| x != id),
            (v + 1 < h).then(|| bg.texel(l, v + 1, u)),
            (l + 1 < n).then(|| bg.texel(l + 1, v, u)),
        ];
        for d in 0..4 {
            let v0 = bg.data[id][d];
            let mut diff = [T::zero(); 3];
            let mut sq = T::zero();
            for a in 0..3 {
                if let Some(nb) = neigh[a] {
                    diff[a] = (bg.data[nb][d] - v0) * scale[a];
                    sq += diff[a] * diff[a];
                }
            }
            if sq == T::zero() {
                continue;
            }
            let root = (sq + eps2).sqrt();
            if d == 0 {
                out.sigma += (root - eps) * inv_n;
            } else {
                out.sh += (root - eps) * inv_n;
            }
            if let Some(g) = grads.as_deref_mut() {
                let wt = if d == 0 { w_sigma } else { w_color };
                if wt == T::zero() {
                    continue;
                }
                let k = wt * inv_n / root;
                for a in 0..3 {
                    if let Some(nb) = neigh[a] {
                        let gd = k * diff[a] * scale[a];
                        g.add(nb, d, gd);
                        g.add(id, d, -gd);
                    }
                }
            }
        }
    }
    out
}

/// RMSProp or SGD state for the background texels.
#[derive(Clone, Debug)]
pub struct BgOptimState<T> {
    pub second_moment: Vec<Texel<T>>,
    pub decay: T,
    pub eps: T,
}

impl<T: Scalar> BgOptimState<T> {
    pub fn new(texels: usize, decay: T, eps: T) -> Self {
        Self {
            second_moment: vec![[T::zero(); 4]; texels],
            decay,
            eps,
        }
    }
}

/// Sparse update of the touched texels.
pub fn bg_step<T: Scalar>(
    bg: &mut MsiBackground<T>,
    grads: &BgGradients<T>,
    state: &mut BgOptimState<T>,
    lr_sigma: T,
    lr_color: T,
    method: OptimMethod,
) -> Result<()> {
    if state.second_moment.len() != bg.data.len() || grads.data.len() != bg.data.len() {
        return Err(Error::Contract("background optimizer state does not match the layers".into()));
    }
    for &t in &grads.list {
        let t = t as usize;
        for k in 0..4 {
            let lr = if k == 0 { lr_sigma } else { lr_color };
            update_scalar(
                method,
                &mut bg.data[t][k],
                grads.data[t][k],
                &mut state.second_moment[t][k],
                lr,
                state.decay,
                state.eps,
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Aabb, ROW_LEN};
    use crate::sh::SH_C0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fg_box() -> Aabb<f64> {
        let h = 1.0 / 3f64.sqrt();
        Aabb::new(Vec3::splat(-h), Vec3::splat(h))
    }

    fn empty_fg() -> SparseGrid<f64> {
        SparseGrid::empty([3, 3, 3], fg_box()).unwrap()
    }

    fn opts() -> RenderOptions<f64> {
        RenderOptions {
            stop_threshold: 0.0,
            ..Default::default()
        }
    }

    fn random_bg(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize) -> MsiBackground<f64> {
        let mut bg = MsiBackground::new(n, w, h, [0.0; 4]).unwrap();
        for t in bg.data_mut() {
            *t = [rng.gen_range(-0.2..1.5), rng.gen_range(-0.1..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        }
        bg
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3<f64> {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalized();
            }
        }
    }

    #[test]
    fn inverse_radii_are_arithmetic() {
        let bg = MsiBackground::<f64>::new(64, 8, 4, [0.0; 4]).unwrap();
        let s: Vec<f64> = bg.radii().iter().map(|r| 1.0 / r).collect();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[63], 0.0);
        for k in 1..64 {
            assert!((s[k - 1] - s[k] - 1.0 / 63.0).abs() < 1e-12);
            assert!(bg.radii()[k] > bg.radii()[k - 1]);
        }
    }

    #[test]
    fn constant_layers_sample_constant() {
        let bg = MsiBackground::<f64>::new(5, 16, 8, [0.7, 0.1, 0.2, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = random_unit(&mut rng) * rng.gen_range(1.0..50.0);
            let (s, c) = bg.sample_background(p).unwrap();
            assert!((s - 0.7).abs() < 1e-12);
            assert!((c[2] - 0.3).abs() < 1e-12);
        }
        assert!(bg.sample_background(Vec3::new(0.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn lattice_node_returns_stored_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, w, h) = (4, 12, 6);
        let bg = random_bg(&mut rng, n, w, h);
        for (l, v, u) in [(0, 2, 3), (1, 0, 11), (2, 5, 0)] {
            let theta = (v as f64 + 0.5) / h as f64 * std::f64::consts::PI;
            let phi = (u as f64 + 0.5) / w as f64 * 2.0 * std::f64::consts::PI - std::f64::consts::PI;
            let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let p = dir * bg.radii()[l];
            let (s, c) = bg.sample_background(p).unwrap();
            let t = bg.data()[bg.texel(l, v, u)];
            assert!((s - t[0].max(0.0)).abs() < 1e-9);
            for ch in 0..3 {
                assert!((c[ch] - t[ch + 1].max(0.0)).abs() < 1e-9);
            }
        }
    }

    // Independent scalar evaluation of the warped trilinear lookup.
    fn oracle(bg: &MsiBackground<f64>, p: Vec3<f64>) -> [f64; 4] {
        use std::f64::consts::PI;
        let (n, w, h) = (bg.n_layers(), bg.width(), bg.height());
        let r = p.norm();
        let lc = ((1.0 - 1.0 / r) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let theta = (p.z / r).acos();
        let phi = p.y.atan2(p.x);
        let u = (phi + PI) / (2.0 * PI) * w as f64 - 0.5;
        let v = (theta / PI * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let mut out = [0.0; 4];
        for dl in 0..2 {
            for dv in 0..2 {
                for du in 0..2 {
                    let li = (lc.floor() as usize + dl).min(n - 1);
                    let vi = (v.floor() as usize + dv).min(h - 1);
                    let ui = (u.floor() as i64 + du as i64).rem_euclid(w as i64) as usize;
                    let wl = if dl == 0 { 1.0 - lc.fract() } else { lc.fract() };
                    let wv = if dv == 0 { 1.0 - v.fract() } else { v.fract() };
                    let fu = u - u.floor();
                    let wu = if du == 0 { 1.0 - fu } else { fu };
                    let t = bg.data()[(li * h + vi) * w + ui];
                    for k in 0..4 {
                        out[k] += wl * wv * wu * t[k];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_scalar_stencil_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bg = random_bg(&mut rng, 6, 10, 7);
        for _ in 0..1000 {
            let p = random_unit(&mut rng) * rng.gen_range(1.0..30.0);
            let st = bg.stencil(bg.layer_coord(1.0 / p.norm()), p.normalized());
            let got = bg.interp(&st);
            let want = oracle(&bg, p);
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() < 1e-6, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn continuous_across_azimuth_seam() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bg = random_bg(&mut rng, 3, 9, 5);
        for eps in [1e-3, 1e-6, 1e-9] {
            let a = Vec3::new(-1.0, eps, 0.3) * 2.0;
            let b = Vec3::new(-1.0, -eps, 0.3) * 2.0;
            let (sa, ca) = bg.sample_background(a).unwrap();
            let (sb, cb) = bg.sample_background(b).unwrap();
            assert!((sa - sb).abs() < 10.0 * eps + 1e-12);
            assert!((ca[0] - cb[0]).abs() < 10.0 * eps + 1e-12);
        }
    }

    #[test]
    fn empty_everything_is_black() {
        let bg = MsiBackground::<f64>::new(4, 8, 4, [0.0; 4]).unwrap();
        let r = Ray::new(Vec3::zero(), Vec3::new(0.3, 0.2, 1.0));
        let res = render_ray_with_background(&empty_fg(), &bg, &r, &opts()).unwrap();
        assert_eq!(res.rgb, [0.0; 3]);
        assert_eq!(res.t_fg, 1.0);
        assert_eq!(res.residual, 1.0);
    }

    #[test]
    fn opaque_innermost_layer() {
        let (sigma, k) = (2.0, [0.2, 0.5, 0.9]);
        let mut bg = MsiBackground::<f64>::new(4, 8, 4, [0.0; 4]).unwrap();
        for v in 0..4 {
            for u in 0..8 {
                let id = bg.texel(0, v, u);
                bg.data_mut()[id] = [sigma, k[0], k[1], k[2]];
            }
        }
        let r = Ray::new(Vec3::zero(), Vec3::new(0.0, 0.6, 0.8));
        let res = render_ray_with_background(&empty_fg(), &bg, &r, &opts()).unwrap();
        // From the origin the first shell spans radius 1 to 1/(1 - 1/6).
        let delta = 1.2 - 1.0;
        for ch in 0..3 {
            assert!((res.rgb[ch] - k[ch] * (1.0 - (-sigma * delta).exp())).abs() < 1e-12);
        }
        assert_eq!(res.t_fg, 1.0);
    }

    #[test]
    fn opaque_foreground_hides_background() {
        let mut row = [0.0; ROW_LEN];
        row[0] = 500.0;
        row[1] = 0.5 / SH_C0;
        let fg = SparseGrid::dense([3, 3, 3], fg_box(), row).unwrap();
        let bg = MsiBackground::<f64>::new(4, 8, 4, [1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = Ray::new(Vec3::zero(), Vec3::new(1.0, 0.2, 0.1));
        let res = render_ray_with_background(&fg, &bg, &r, &opts()).unwrap();
        assert!(res.t_fg < 1e-6);
        let full = RenderOptions { background: [0.0; 3], ..opts() };
        let fg_only = crate::render::render_ray(&fg, &r, &full);
        assert!((res.rgb[0] - fg_only.rgb[0]).abs() < 1e-6);
    }

    fn random_fg(rng: &mut ChaCha8Rng) -> SparseGrid<f64> {
        SparseGrid::from_fn([3, 3, 3], fg_box(), |_, _| {
            let mut r = [0.0; ROW_LEN];
            r[0] = rng.gen_range(0.2..2.0);
            for ch in 0..3 {
                r[1 + ch * 9] = rng.gen_range(0.5..2.0);
            }
            Some(r)
        })
        .unwrap()
    }

    #[test]
    fn composite_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fg = random_fg(&mut rng);
        let bg = random_bg(&mut rng, 5, 8, 6);
        let mut tr = CompositeTrace::new();
        for _ in 0..500 {
            let o = random_unit(&mut rng) * rng.gen_range(0.0..0.9);
            let r = Ray::new(o, random_unit(&mut rng));
            let res = trace_ray_with_background(&fg, &bg, &r, &opts(), 0.0, &mut tr).unwrap();
            let wf: f64 = tr.fg.samples.iter().map(|s| s.weight()).sum();
            let wb: f64 = tr.bg.iter().map(|s| s.weight()).sum();
            assert!((wf + res.t_fg * wb + res.residual - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fg = random_fg(&mut rng);
        let mut bg = random_bg(&mut rng, 4, 6, 4);
        // Keep every texel strictly away from the clamps.
        for t in bg.data_mut() {
            t[0] = t[0].abs() + 0.2;
            for k in 1..4 {
                t[k] = t[k].abs() + 0.1;
            }
        }
        let up = CompositeUpstream {
            color: [0.3, -0.6, 0.9],
            residual: 0.4,
            t_fg: -0.7,
        };
        for _ in 0..4 {
            let o = random_unit(&mut rng) * 0.5;
            let r = Ray::new(o, random_unit(&mut rng));
            let loss = |fg: &SparseGrid<f64>, bg: &MsiBackground<f64>| {
                let c = render_ray_with_background(fg, bg, &r, &opts()).unwrap();
                (0..3).map(|i| up.color[i] * c.rgb[i]).sum::<f64>() + up.residual * c.residual + up.t_fg * c.t_fg
            };
            let mut tr = CompositeTrace::new();
            trace_ray_with_background(&fg, &bg, &r, &opts(), 0.0, &mut tr).unwrap();
            let mut gf = GradientBuffer::new(fg.row_count());
            let mut gb = BgGradients::new(bg.texel_count());
            backward_ray_with_background(&tr, &opts(), &up, None, &mut gf, &mut gb);
            let h = 1e-6;
            let close = |fd: f64, a: f64| (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-7;
            for id in 0..bg.texel_count() {
                for k in 0..4 {
                    let mut p = bg.clone();
                    p.data_mut()[id][k] += h;
                    let mut m = bg.clone();
                    m.data_mut()[id][k] -= h;
                    let fd = (loss(&fg, &p) - loss(&fg, &m)) / (2.0 * h);
                    assert!(close(fd, gb.get(id)[k]), "texel {id} k {k}: {fd} vs {}", gb.get(id)[k]);
                }
            }
            for row in 0..fg.row_count() {
                for k in [0, 1, 4, 19] {
                    let mut p = fg.clone();
                    p.rows_mut()[row][k] += h;
                    let mut m = fg.clone();
                    m.rows_mut()[row][k] -= h;
                    let fd = (loss(&p, &bg) - loss(&m, &bg)) / (2.0 * h);
                    assert!(close(fd, gf.row(row)[k]), "row {row} k {k}: {fd} vs {}", gf.row(row)[k]);
                }
            }
        }
    }

    #[test]
    fn bg_tv_wraps_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bg = random_bg(&mut rng, 3, 5, 4);
        // Only the azimuthal wrap links column 4 back to column 0.
        let mut flat = MsiBackground::<f64>::new(3, 5, 4, [0.0; 4]).unwrap();
        let id = flat.texel(1, 1, 0);
        flat.data_mut()[id][0] = 1.0;
        let seam = flat.texel(1, 1, 4);
        let tv = bg_tv_loss(&flat, &[seam], 1.0, 1.0, 0.0, None);
        assert!((tv.sigma - 5.0 / 256.0).abs() < 1e-12);

        let texels: Vec<usize> = (0..bg.texel_count()).collect();
        let (ws, wc, eps) = (0.7, 1.3, 1e-6);
        let mut g = BgGradients::new(bg.texel_count());
        bg_tv_loss(&bg, &texels, ws, wc, eps, Some(&mut g));
        let val = |b: &MsiBackground<f64>| bg_tv_loss(b, &texels, ws, wc, eps, None).weighted(ws, wc);
        let h = 1e-6;
        for id in 0..bg.texel_count() {
            for k in 0..4 {
                let mut p = bg.clone();
                p.data_mut()[id][k] += h;
                let mut m = bg.clone();
                m.data_mut()[id][k] -= h;
                let fd = (val(&p) - val(&m)) / (2.0 * h);
                let a = g.get(id)[k];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()) + 1e-7, "{fd} vs {a}");
            }
        }
    }

    #[test]
    fn bg_step_is_sparse() {
        let mut bg = MsiBackground::<f64>::new(2, 4, 2, [0.5; 4]).unwrap();
        let mut g = BgGradients::new(bg.texel_count());
        g.add(3, 0, 1.0);
        let mut st = BgOptimState::new(bg.texel_count(), 0.95, 1e-8);
        bg_step(&mut bg, &g, &mut st, 0.1, 0.1, OptimMethod::Sgd).unwrap();
        assert_eq!(bg.data()[3][0], 0.4);
        assert_eq!(bg.data()[2], [0.5; 4]);
    }

    #[test]
    fn from_parts_rejects_bad_radii() {
        let bg = MsiBackground::<f64>::new(3, 2, 2, [0.0; 4]).unwrap();
        let mut radii = bg.radii().to_vec();
        assert!(MsiBackground::from_parts(3, 2, 2, radii.clone(), bg.data().to_vec()).is_ok());
        radii[1] = 3.0;
        assert!(MsiBackground::from_parts(3, 2, 2, radii, bg.data().to_vec()).is_err());
    }
}
