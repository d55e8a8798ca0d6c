//! Real spherical harmonics up to degree 2.
//!
//! Coefficients are stored channel-major: nine coefficients for red, then
//! green, then blue, each block ordered by `(l, m)` as
//! `(0,0) (1,-1) (1,0) (1,1) (2,-2) (2,-1) (2,0) (2,1) (2,2)`.
//! This ordering is part of the on-disk grid format.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vec3::Vec3;

pub const SH_BASIS_DIM: usize = 9;
pub const SH_COEFFS: usize = 3 * SH_BASIS_DIM;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Unit viewing direction in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewDir<T>(Vec3<T>);

impl<T: Scalar> ViewDir<T> {
    /// Normalizes `v`. Fails for zero-length or non-finite input.
    pub fn new(v: Vec3<T>) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > T::zero()) {
            return Err(Error::Contract(format!(
                "view direction must be finite and nonzero, got {v:?}"
            )));
        }
        Ok(Self(v * (T::one() / n)))
    }

    /// Wraps a vector the caller already knows to be unit length.
    #[inline]
    pub(crate) fn from_unit(v: Vec3<T>) -> Self {
        Self(v)
    }

    #[inline]
    pub fn get(self) -> Vec3<T> {
        self.0
    }
}

/// 27 SH coefficients for one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShCoeffs<T>(pub [T; SH_COEFFS]);

impl<T: Scalar> Default for ShCoeffs<T> {
    fn default() -> Self {
        Self([T::zero(); SH_COEFFS])
    }
}

impl<T: Scalar> ShCoeffs<T> {
    /// Coefficients of a view-independent color.
    pub fn from_dc_color(rgb: [T; 3]) -> Self {
        let mut c = Self::default();
        for (ch, v) in rgb.into_iter().enumerate() {
            c.0[ch * SH_BASIS_DIM] = v / T::lit(SH_C0);
        }
        c
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        &self.0[ch * SH_BASIS_DIM..(ch + 1) * SH_BASIS_DIM]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// The nine basis values at `dir`.
#[inline]
pub fn eval_sh_basis<T: Scalar>(dir: ViewDir<T>) -> [T; SH_BASIS_DIM] {
    let Vec3 { x, y, z } = dir.get();
    let c1 = T::lit(SH_C1);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        T::lit(SH_C0),
        -c1 * y,
        c1 * z,
        -c1 * x,
        T::lit(SH_C2[0]) * x * y,
        T::lit(SH_C2[1]) * y * z,
        T::lit(SH_C2[2]) * (T::lit(2.0) * zz - xx - yy),
        T::lit(SH_C2[3]) * x * z,
        T::lit(SH_C2[4]) * (xx - yy),
    ]
}

/// Combines channel-major coefficients with precomputed basis values.
///
/// Returns the clamped color and, per channel, whether the clamp was
/// inactive (the color derivative passes through only where it is `true`).
#[inline]
pub fn combine<T: Scalar>(
    basis: &[T; SH_BASIS_DIM],
    coeffs: &[T],
) -> ([T; 3], [bool; 3]) {
    debug_assert_eq!(coeffs.len(), SH_COEFFS);
    let mut rgb = [T::zero(); 3];
    let mut live = [false; 3];
    for ch in 0..3 {
        let c = &coeffs[ch * SH_BASIS_DIM..(ch + 1) * SH_BASIS_DIM];
        let v: T = basis.iter().zip(c).map(|(&b, &k)| b * k).sum();
        if v > T::zero() {
            rgb[ch] = v;
            live[ch] = true;
        }
    }
    (rgb, live)
}

/// Color seen from `dir`, clamped below at zero per channel.
pub fn sh_to_rgb<T: Scalar>(coeffs: &ShCoeffs<T>, dir: ViewDir<T>) -> [T; 3] {
    combine(&eval_sh_basis(dir), &coeffs.0).0
}

/// Derivative of [`sh_to_rgb`] with respect to the coefficients, in the
/// same channel-major layout: `out[ch*9 + k]` is `d rgb[ch] / d coeff[ch*9 + k]`.
/// Cross-channel entries are identically zero and omitted.
pub fn sh_to_rgb_jacobian<T: Scalar>(coeffs: &ShCoeffs<T>, dir: ViewDir<T>) -> [T; SH_COEFFS] {
    let basis = eval_sh_basis(dir);
    let (_, live) = combine(&basis, &coeffs.0);
    let mut out = [T::zero(); SH_COEFFS];
    for ch in 0..3 {
        if live[ch] {
            out[ch * SH_BASIS_DIM..(ch + 1) * SH_BASIS_DIM].copy_from_slice(&basis);
        }
    }
    out
}
