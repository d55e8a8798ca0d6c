//! Sparse voxel grid: a dense index lattice pointing into a table of rows.
//!
//! Values live at lattice points. Lattice point `(i, j, k)` sits at
//! `aabb.min + (i, j, k) * extent / (dims - 1)`, so corner samples are exact.
//! EMPTY lattice cells read as all zeros.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientBuffer;
use crate::scalar::Scalar;
use crate::sh::{ShCoeffs, SH_COEFFS};
use crate::vec3::Vec3;

/// Index-lattice marker for a cell with no data row.
pub const EMPTY: i32 = -1;
/// σ followed by 27 SH coefficients.
pub const ROW_LEN: usize = 1 + SH_COEFFS;
pub type Row<T> = [T; ROW_LEN];

const NO_ROW: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Scalar> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Self { min, max }
    }

    /// Axis-aligned cube `[-half, half]^3`.
    pub fn cube(half: T) -> Self {
        Self::new(Vec3::splat(-half), Vec3::splat(half))
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3<T> {
        (self.min + self.max) * T::lit(0.5)
    }

    pub fn contains(&self, p: Vec3<T>, tol: T) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }

    /// Slab test; returns the parametric entry/exit of `o + t d` clipped to `t >= 0`.
    pub fn intersect(&self, o: Vec3<T>, d: Vec3<T>) -> Option<(T, T)> {
        let mut t0 = T::zero();
        let mut t1 = T::infinity();
        for a in 0..3 {
            if d[a] == T::zero() {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = T::one() / d[a];
            let mut ta = (self.min[a] - o[a]) * inv;
            let mut tb = (self.max[a] - o[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }

    pub fn cast<U: Scalar>(&self) -> Aabb<U> {
        Aabb::new(self.min.cast(), self.max.cast())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    #[default]
    Trilinear,
    Nearest,
}

/// Up to eight (row, weight) pairs describing one interpolated sample.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    rows: [u32; 8],
    weights: [T; 8],
    len: u8,
}

impl<T: Scalar> Stencil<T> {
    /// Occupied rows with their interpolation weights.
    #[inline]
    pub fn entries(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.rows[..self.len as usize]
            .iter()
            .zip(&self.weights[..self.len as usize])
            .filter(|(&r, _)| r != NO_ROW)
            .map(|(&r, &w)| (r as usize, w))
    }

    /// True when every lattice point in the stencil is EMPTY.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows[..self.len as usize].iter().all(|&r| r == NO_ROW)
    }
}

/// Mapping from old to new row ids produced by a prune.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowRemap {
    map: Vec<i32>,
    new_len: usize,
}

impl RowRemap {
    pub fn get(&self, old: usize) -> Option<usize> {
        let v = self.map[old];
        (v >= 0).then_some(v as usize)
    }

    pub fn old_len(&self) -> usize {
        self.map.len()
    }

    pub fn new_len(&self) -> usize {
        self.new_len
    }
}

/// What a prune compares against its threshold.
#[derive(Clone, Copy, Debug)]
pub enum PruneCriterion<'a, T> {
    /// Per-row maximum rendering weight.
    Weight(&'a [T]),
    /// Stored σ.
    Density,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrid<T> {
    dims: [usize; 3],
    aabb: Aabb<T>,
    index: Vec<i32>,
    rows: Vec<Row<T>>,
}

fn alloc<V: Clone>(n: usize, v: V, dims: [usize; 3]) -> Result<Vec<V>> {
    let mut out = Vec::new();
    out.try_reserve_exact(n).map_err(|_| Error::Resource {
        dims,
        cells: dims.iter().product(),
    })?;
    out.resize(n, v);
    Ok(out)
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Contract(format!("grid dims must be >= 2 per axis, got {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= i32::MAX as usize)
        .ok_or(Error::Resource {
            dims,
            cells: usize::MAX,
        })
}

impl<T: Scalar> SparseGrid<T> {
    /// A grid with every cell EMPTY.
    pub fn empty(dims: [usize; 3], aabb: Aabb<T>) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self {
            dims,
            aabb,
            index: alloc(n, EMPTY, dims)?,
            rows: Vec::new(),
        })
    }

    /// A fully occupied grid with every row equal to `row`.
    pub fn dense(dims: [usize; 3], aabb: Aabb<T>, row: Row<T>) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut index = alloc(n, 0i32, dims)?;
        for (i, v) in index.iter_mut().enumerate() {
            *v = i as i32;
        }
        Ok(Self {
            dims,
            aabb,
            index,
            rows: alloc(n, row, dims)?,
        })
    }

    /// Builds a grid by evaluating `f` at each lattice point; `None` leaves the cell EMPTY.
    pub fn from_fn(
        dims: [usize; 3],
        aabb: Aabb<T>,
        mut f: impl FnMut([usize; 3], Vec3<T>) -> Option<Row<T>>,
    ) -> Result<Self> {
        let mut g = Self::empty(dims, aabb)?;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = g.lattice_point([i, j, k]);
                    if let Some(row) = f([i, j, k], p) {
                        let c = g.linear([i, j, k]);
                        g.index[c] = g.rows.len() as i32;
                        g.rows.push(row);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Validates and assembles a grid from raw parts.
    pub fn from_parts(
        dims: [usize; 3],
        aabb: Aabb<T>,
        index: Vec<i32>,
        rows: Vec<Row<T>>,
    ) -> Result<Self> {
        let n = check_dims(dims)?;
        if index.len() != n {
            return Err(Error::Invalid(format!(
                "index lattice has {} entries, dims {dims:?} need {n}",
                index.len()
            )));
        }
        let mut seen = vec![false; rows.len()];
        for &r in &index {
            if r == EMPTY {
                continue;
            }
            if r < 0 || r as usize >= rows.len() {
                return Err(Error::Invalid(format!("row id {r} out of range")));
            }
            if std::mem::replace(&mut seen[r as usize], true) {
                return Err(Error::Invalid(format!("row id {r} referenced twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("data table has unreferenced rows".into()));
        }
        Ok(Self {
            dims,
            aabb,
            index,
            rows,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn aabb(&self) -> &Aabb<T> {
        &self.aabb
    }

    pub fn index(&self) -> &[i32] {
        &self.index
    }

    pub fn rows(&self) -> &[Row<T>] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Row<T>] {
        &mut self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn cell_count(&self) -> usize {
        self.index.len()
    }

    #[inline]
    pub fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unlinear(&self, c: usize) -> [usize; 3] {
        let i = c % self.dims[0];
        let r = c / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// Row id stored at a lattice point.
    #[inline]
    pub fn cell(&self, ijk: [usize; 3]) -> Option<usize> {
        let r = self.index[self.linear(ijk)];
        (r >= 0).then_some(r as usize)
    }

    /// Stored values at a lattice point, zeros when EMPTY.
    pub fn cell_values(&self, ijk: [usize; 3]) -> Row<T> {
        self.cell(ijk)
            .map(|r| self.rows[r])
            .unwrap_or([T::zero(); ROW_LEN])
    }

    /// Spacing between lattice points per axis.
    pub fn voxel_size(&self) -> Vec3<T> {
        let e = self.aabb.extent();
        Vec3::new(
            e.x / T::from_usize_lossy(self.dims[0] - 1),
            e.y / T::from_usize_lossy(self.dims[1] - 1),
            e.z / T::from_usize_lossy(self.dims[2] - 1),
        )
    }

    pub fn min_voxel_edge(&self) -> T {
        let v = self.voxel_size();
        v.x.min(v.y).min(v.z)
    }

    pub fn lattice_point(&self, [i, j, k]: [usize; 3]) -> Vec3<T> {
        let v = self.voxel_size();
        self.aabb.min
            + Vec3::new(
                v.x * T::from_usize_lossy(i),
                v.y * T::from_usize_lossy(j),
                v.z * T::from_usize_lossy(k),
            )
    }

    /// Continuous lattice coordinates of a world position.
    #[inline]
    pub fn to_lattice(&self, p: Vec3<T>) -> Vec3<T> {
        let e = self.aabb.extent();
        let rel = p - self.aabb.min;
        Vec3::new(
            rel.x * T::from_usize_lossy(self.dims[0] - 1) / e.x,
            rel.y * T::from_usize_lossy(self.dims[1] - 1) / e.y,
            rel.z * T::from_usize_lossy(self.dims[2] - 1) / e.z,
        )
    }

    fn check_inside(&self, p: Vec3<T>) -> Result<()> {
        let tol = self.aabb.extent().norm() * T::lit(1e-6);
        if !p.is_finite() || !self.aabb.contains(p, tol) {
            return Err(Error::Contract(format!(
                "sample position {p:?} outside grid bounds {:?}",
                self.aabb
            )));
        }
        Ok(())
    }

    #[inline]
    fn row_at(&self, c: usize) -> u32 {
        let r = self.index[c];
        if r < 0 {
            NO_ROW
        } else {
            r as u32
        }
    }

    /// Stencil at lattice coordinates `u`; positions are clamped into the lattice.
    #[inline]
    pub fn stencil_at(&self, u: Vec3<T>, mode: InterpMode) -> Stencil<T> {
        let [dx, dy, dz] = self.dims;
        match mode {
            InterpMode::Nearest => {
                let near = |v: T, d: usize| -> usize {
                    let r = v.round().max(T::zero()).to_usize().unwrap_or(0);
                    r.min(d - 1)
                };
                let c = self.linear([near(u.x, dx), near(u.y, dy), near(u.z, dz)]);
                let mut rows = [NO_ROW; 8];
                let mut weights = [T::zero(); 8];
                rows[0] = self.row_at(c);
                weights[0] = T::one();
                Stencil {
                    rows,
                    weights,
                    len: 1,
                }
            }
            InterpMode::Trilinear => {
                let split = |v: T, d: usize| -> (usize, T) {
                    let hi = T::from_usize_lossy(d - 1);
                    let v = v.max(T::zero()).min(hi);
                    let i0 = v.floor().to_usize().unwrap_or(0).min(d - 2);
                    (i0, v - T::from_usize_lossy(i0))
                };
                let (i, fx) = split(u.x, dx);
                let (j, fy) = split(u.y, dy);
                let (k, fz) = split(u.z, dz);
                let base = self.linear([i, j, k]);
                let sx = 1;
                let sy = dx;
                let sz = dx * dy;
                let one = T::one();
                let wx = [one - fx, fx];
                let wy = [one - fy, fy];
                let wz = [one - fz, fz];
                let mut rows = [NO_ROW; 8];
                let mut weights = [T::zero(); 8];
                for n in 0..8 {
                    let (a, b, c) = (n & 1, (n >> 1) & 1, n >> 2);
                    rows[n] = self.row_at(base + a * sx + b * sy + c * sz);
                    weights[n] = wx[a] * wy[b] * wz[c];
                }
                Stencil {
                    rows,
                    weights,
                    len: 8,
                }
            }
        }
    }

    /// Interpolation stencil at a world position.
    pub fn stencil(&self, p: Vec3<T>, mode: InterpMode) -> Result<Stencil<T>> {
        self.check_inside(p)?;
        Ok(self.stencil_at(self.to_lattice(p), mode))
    }

    /// Interpolated σ before the clamp at zero.
    #[inline]
    pub fn raw_sigma(&self, st: &Stencil<T>) -> T {
        st.entries()
            .map(|(r, w)| w * self.rows[r][0])
            .fold(T::zero(), |a, b| a + b)
    }

    /// Accumulates `w * row[1..]` over the stencil into `out`.
    #[inline]
    pub fn interp_sh(&self, st: &Stencil<T>, out: &mut [T; SH_COEFFS]) {
        *out = [T::zero(); SH_COEFFS];
        for (r, w) in st.entries() {
            let row = &self.rows[r];
            for (o, &v) in out.iter_mut().zip(&row[1..]) {
                *o += w * v;
            }
        }
    }

    /// Interpolated (σ, SH) at `p`; σ is clamped below at zero.
    pub fn sample(&self, p: Vec3<T>, mode: InterpMode) -> Result<(T, ShCoeffs<T>)> {
        let st = self.stencil(p, mode)?;
        let mut sh = [T::zero(); SH_COEFFS];
        self.interp_sh(&st, &mut sh);
        Ok((self.raw_sigma(&st).relu(), ShCoeffs(sh)))
    }

    /// Adjoint of [`sample`](Self::sample): scatters `upstream * weight` into
    /// each occupied stencil row. The σ entry is dropped where the clamp is active.
    pub fn sample_backward(
        &self,
        p: Vec3<T>,
        mode: InterpMode,
        upstream: &Row<T>,
        grads: &mut GradientBuffer<T>,
    ) -> Result<()> {
        let st = self.stencil(p, mode)?;
        let mut up = *upstream;
        if self.raw_sigma(&st) <= T::zero() {
            up[0] = T::zero();
        }
        for (r, w) in st.entries() {
            grads.add_scaled(r, w, &up);
        }
        Ok(())
    }

    /// Removes rows whose cell and all 26 neighbours fall below `threshold`.
    ///
    /// EMPTY cells and out-of-lattice neighbours count as unoccupied. The
    /// data table is compacted preserving row order; the returned map
    /// re-indexes any per-row side tables.
    pub fn prune(&mut self, criterion: PruneCriterion<'_, T>, threshold: T) -> Result<RowRemap> {
        if let PruneCriterion::Weight(w) = criterion {
            if w.len() != self.rows.len() {
                return Err(Error::Contract(format!(
                    "prune weights have {} entries for {} rows",
                    w.len(),
                    self.rows.len()
                )));
            }
        }
        let value = |r: usize| match criterion {
            PruneCriterion::Weight(w) => w[r],
            PruneCriterion::Density => self.rows[r][0],
        };
        let mut occ: Vec<bool> = self
            .index
            .iter()
            .map(|&r| r >= 0 && !(value(r as usize) < threshold))
            .collect();
        // 26-neighbourhood dilation as three separable 3-tap max filters.
        let [dx, dy, dz] = self.dims;
        for (stride, len) in [(1, dx), (dx, dy), (dx * dy, dz)] {
            let src = occ.clone();
            for (c, o) in occ.iter_mut().enumerate() {
                let pos = (c / stride) % len;
                let mut v = src[c];
                if pos > 0 {
                    v |= src[c - stride];
                }
                if pos + 1 < len {
                    v |= src[c + stride];
                }
                *o = v;
            }
        }
        let mut keep = vec![false; self.rows.len()];
        for (c, &r) in self.index.iter().enumerate() {
            if r >= 0 && occ[c] {
                keep[r as usize] = true;
            }
        }
        let mut map = vec![EMPTY; self.rows.len()];
        let mut next = 0i32;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                map[r] = next;
                next += 1;
            }
        }
        let mut w = 0;
        for r in 0..self.rows.len() {
            if keep[r] {
                self.rows[w] = self.rows[r];
                w += 1;
            }
        }
        self.rows.truncate(w);
        for r in self.index.iter_mut() {
            if *r >= 0 {
                *r = map[*r as usize];
            }
        }
        Ok(RowRemap {
            map,
            new_len: next as usize,
        })
    }

    /// Resamples onto `new_dims` over the same bounds by trilinear
    /// interpolation of the stored (unclamped) values. A new lattice point is
    /// occupied iff some occupied old point has nonzero weight in its stencil.
    pub fn upsample(&self, new_dims: [usize; 3]) -> Result<Self> {
        check_dims(new_dims)?;
        // Exact rational lattice mapping so coincident points get weight exactly 1.
        let axis = |a: usize, i: usize| -> (usize, T) {
            let num = i * (self.dims[a] - 1);
            let den = new_dims[a] - 1;
            let i0 = (num / den).min(self.dims[a] - 2);
            let rem = num - i0 * den;
            (i0, T::from_usize_lossy(rem) / T::from_usize_lossy(den))
        };
        let mut out = Self::empty(new_dims, self.aabb)?;
        let mut rows: Vec<Row<T>> = Vec::new();
        for k in 0..new_dims[2] {
            let (k0, fz) = axis(2, k);
            for j in 0..new_dims[1] {
                let (j0, fy) = axis(1, j);
                for i in 0..new_dims[0] {
                    let (i0, fx) = axis(0, i);
                    let mut acc = [T::zero(); ROW_LEN];
                    let mut occupied = false;
                    for n in 0..8 {
                        let (a, b, c) = (n & 1, (n >> 1) & 1, n >> 2);
                        let w = (if a == 1 { fx } else { T::one() - fx })
                            * (if b == 1 { fy } else { T::one() - fy })
                            * (if c == 1 { fz } else { T::one() - fz });
                        if w == T::zero() {
                            continue;
                        }
                        if let Some(r) = self.cell([i0 + a, j0 + b, k0 + c]) {
                            occupied = true;
                            for (o, &v) in acc.iter_mut().zip(&self.rows[r]) {
                                *o += w * v;
                            }
                        }
                    }
                    if occupied {
                        let c = out.linear([i, j, k]);
                        if rows.len() == rows.capacity() {
                            rows.try_reserve(rows.len().max(1024)).map_err(|_| {
                                Error::Resource {
                                    dims: new_dims,
                                    cells: out.index.len(),
                                }
                            })?;
                        }
                        out.index[c] = rows.len() as i32;
                        rows.push(acc);
                    }
                }
            }
        }
        out.rows = rows;
        Ok(out)
    }

    /// Dims of the exact 2x subdivision under the lattice-point convention.
    pub fn subdivided_dims(&self) -> [usize; 3] {
        self.dims.map(|d| 2 * d - 1)
    }

    /// True if every σ and SH value is finite.
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Scalar>(&self) -> SparseGrid<U> {
        SparseGrid {
            dims: self.dims,
            aabb: self.aabb.cast(),
            index: self.index.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.map(crate::scalar::cast::<T, U>))
                .collect(),
        }
    }
}
