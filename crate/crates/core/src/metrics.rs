//! Image-quality metrics.

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scalar::Scalar;

fn check_shapes<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Invalid(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    check_shapes(a, b)?;
    let n = T::from_usize_lossy(a.data.len() * 3);
    let s: T = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]) * (p[c] - q[c])))
        .sum();
    Ok(s / n)
}

/// Peak signal-to-noise ratio for unit peak; `+inf` for identical images.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    let m = mse(a, b)?;
    if m == T::zero() {
        return Ok(T::infinity());
    }
    Ok(-T::lit(10.0) * m.log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps<T: Scalar>() -> [T; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = raw.iter().sum();
    raw.map(|v| T::lit(v / s))
}

/// Valid-mode separable filtering of a single-channel plane.
fn filter_valid<T: Scalar>(src: &[T], w: usize, h: usize, taps: &[T; SSIM_WINDOW]) -> Vec<T> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![T::zero(); ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * src[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ = 1.5), unit dynamic
/// range, valid filtering, averaged over the map and then over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    check_shapes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps::<T>();
    let c1 = T::lit(SSIM_K1 * SSIM_K1);
    let c2 = T::lit(SSIM_K2 * SSIM_K2);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for ch in 0..3 {
        let x: Vec<T> = a.data.iter().map(|p| p[ch]).collect();
        let y: Vec<T> = b.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
        let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(p, q)| *p * *q).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let sxx = filter_valid(&xx, w, h, &taps);
        let syy = filter_valid(&yy, w, h, &taps);
        let sxy = filter_valid(&xy, w, h, &taps);
        let n = T::from_usize_lossy(mx.len());
        let mut acc = T::zero();
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((two * ux * uy + c1) * (two * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n;
    }
    Ok(total / T::lit(3.0))
}
