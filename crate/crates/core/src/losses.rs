//! Training objectives: reconstruction error, total variation on the grid,
//! a Cauchy sparsity prior on sample opacities and a beta prior on
//! foreground transmittance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientBuffer;
use crate::grid::{SparseGrid, ROW_LEN};
use crate::scalar::Scalar;

/// Regularizer weights. All nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub tv_sigma: f64,
    pub tv_sh: f64,
    /// Cauchy sparsity weight.
    pub sparsity: f64,
    pub beta: f64,
    /// Fraction of lattice cells visited by TV per step.
    pub tv_sample_fraction: f64,
    /// Smoothing inside the TV square root.
    pub tv_epsilon: f64,
    /// Keep TV active after the first resolution change.
    pub tv_after_upsample: bool,
    /// Length of each contiguous run of cells visited by TV.
    pub tv_segment: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tv_sigma: 0.0,
            tv_sh: 0.0,
            sparsity: 0.0,
            beta: 0.0,
            tv_sample_fraction: 0.01,
            tv_epsilon: 1e-6,
            tv_after_upsample: true,
            tv_segment: 64,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.tv_sigma, self.tv_sh, self.sparsity, self.beta, self.tv_epsilon];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.tv_sample_fraction > 0.0 && self.tv_sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "tv_sample_fraction must lie in (0, 1], got {}",
                self.tv_sample_fraction
            )));
        }
        Ok(())
    }
}

/// Mean over rays of the squared color error, with dL/dC per ray.
pub fn mse_loss<T: Scalar>(pred: &[[T; 3]], truth: &[[T; 3]]) -> Result<(T, Vec<[T; 3]>)> {
    if pred.is_empty() {
        return Err(Error::Invalid("empty ray batch".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "batch length mismatch: {} renders, {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let n = T::from_usize_lossy(pred.len());
    let two_over_n = T::lit(2.0) / n;
    let mut total = T::zero();
    let grads = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let mut g = [T::zero(); 3];
            for ch in 0..3 {
                let d = p[ch] - t[ch];
                total += d * d;
                g[ch] = two_over_n * d;
            }
            g
        })
        .collect();
    Ok((total / n, grads))
}

/// Weighted TV terms evaluated on a voxel sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TvValue<T> {
    /// Unweighted σ term.
    pub sigma: T,
    /// Unweighted SH term (summed over the 27 channels).
    pub sh: T,
}

impl<T: Scalar> TvValue<T> {
    pub fn weighted(&self, w_sigma: T, w_sh: T) -> T {
        w_sigma * self.sigma + w_sh * self.sh
    }
}

/// Total variation over the lattice cells in `voxels` (linear indices).
///
/// Differences to the `+1` neighbour on each axis are scaled by `D_axis / 256`.
/// For σ, EMPTY or out-of-lattice neighbours read as zero; for SH they read
/// as the current cell, giving zero difference. Each term is
/// `sqrt(dx^2 + dy^2 + dz^2 + eps^2) - eps`, averaged over `voxels`.
///
/// When `grads` is given, `w_sigma` and `w_sh` times the term gradients are
/// accumulated into it.
pub fn tv_loss<T: Scalar>(
    grid: &SparseGrid<T>,
    voxels: &[usize],
    w_sigma: T,
    w_sh: T,
    eps: T,
    mut grads: Option<&mut GradientBuffer<T>>,
) -> TvValue<T> {
    let mut out = TvValue::default();
    if voxels.is_empty() {
        return out;
    }
    let dims = grid.dims();
    let scale = dims.map(|d| T::from_usize_lossy(d) / T::lit(256.0));
    let inv_n = T::one() / T::from_usize_lossy(voxels.len());
    let rows = grid.rows();
    let eps2 = eps * eps;

    for &c in voxels {
        let ijk = grid.unlinear(c);
        let here = grid.cell(ijk);
        let neigh: [Option<usize>; 3] = std::array::from_fn(|a| {
            let mut n = ijk;
            n[a] += 1;
            if n[a] < dims[a] {
                grid.cell(n)
            } else {
                None
            }
        });
        if here.is_none() && neigh.iter().all(Option::is_none) {
            continue;
        }
        let v0 = here.map(|r| rows[r]).unwrap_or([T::zero(); ROW_LEN]);

        for d in 0..ROW_LEN {
            let is_sigma = d == 0;
            if !is_sigma && here.is_none() && neigh.iter().all(Option::is_none) {
                break;
            }
            let mut diff = [T::zero(); 3];
            let mut sq = T::zero();
            for a in 0..3 {
                let nv = match neigh[a] {
                    Some(r) => rows[r][d],
                    None if is_sigma => T::zero(),
                    None => v0[d],
                };
                diff[a] = (nv - v0[d]) * scale[a];
                sq += diff[a] * diff[a];
            }
            if sq == T::zero() {
                continue;
            }
            let root = (sq + eps2).sqrt();
            if is_sigma {
                out.sigma += (root - eps) * inv_n;
            } else {
                out.sh += (root - eps) * inv_n;
            }
            if let Some(g) = grads.as_deref_mut() {
                let w = if is_sigma { w_sigma } else { w_sh };
                if w == T::zero() {
                    continue;
                }
                let k = w * inv_n / root;
                let mut own = T::zero();
                for a in 0..3 {
                    let gd = k * diff[a] * scale[a];
                    if let Some(r) = neigh[a] {
                        g.add(r, d, gd);
                        own -= gd;
                    } else if is_sigma {
                        own -= gd;
                    }
                }
                if let Some(r) = here {
                    if own != T::zero() {
                        g.add(r, d, own);
                    }
                }
            }
        }
    }
    out
}

/// Random contiguous runs of lattice cells covering about `fraction` of the grid.
pub fn sample_tv_voxels(cells: usize, fraction: f64, segment: usize, rng: &mut impl Rng) -> Vec<usize> {
    if cells == 0 {
        return Vec::new();
    }
    let want = ((cells as f64 * fraction).ceil() as usize).clamp(1, cells);
    if want == cells {
        return (0..cells).collect();
    }
    let seg = segment.clamp(1, want);
    let runs = want.div_ceil(seg);
    let mut out = Vec::with_capacity(runs * seg);
    for _ in 0..runs {
        let start = rng.gen_range(0..=cells - seg);
        out.extend(start..start + seg);
    }
    out
}

/// `weight * sum log(1 + 2 sigma^2)` over sample opacities, with per-sample gradient.
pub fn cauchy_sparsity_loss<T: Scalar>(sigmas: &[T], weight: T) -> (T, Vec<T>) {
    let mut total = T::zero();
    let grads = sigmas
        .iter()
        .map(|&s| {
            let (v, g) = cauchy_term(s, weight);
            total += v;
            g
        })
        .collect();
    (total, grads)
}

/// Weighted `log(1 + 2 sigma^2)` for one sample and its derivative.
#[inline]
pub fn cauchy_term<T: Scalar>(sigma: T, weight: T) -> (T, T) {
    let q = T::one() + T::lit(2.0) * sigma * sigma;
    (weight * q.ln(), weight * T::lit(4.0) * sigma / q)
}

pub const BETA_CLAMP: f64 = 1e-6;

/// `weight * sum (log T + log(1 - T))` over per-ray foreground transmittance.
/// Inputs are clamped to `[1e-6, 1 - 1e-6]`; the gradient is evaluated at the
/// clamped value.
pub fn beta_loss<T: Scalar>(t_fg: &[T], weight: T) -> (T, Vec<T>) {
    let mut total = T::zero();
    let grads = t_fg
        .iter()
        .map(|&t| {
            let (v, g) = beta_term(t, weight);
            total += v;
            g
        })
        .collect();
    (total, grads)
}

/// Weighted `log T + log(1 - T)` for one ray and its derivative, both
/// evaluated at `T` clamped to `[BETA_CLAMP, 1 - BETA_CLAMP]`.
#[inline]
pub fn beta_term<T: Scalar>(t_fg: T, weight: T) -> (T, T) {
    let lo = T::lit(BETA_CLAMP);
    let t = t_fg.max(lo).min(T::one() - lo);
    (
        weight * (t.ln() + (T::one() - t).ln()),
        weight * (T::one() / t - T::one() / (T::one() - t)),
    )
}
