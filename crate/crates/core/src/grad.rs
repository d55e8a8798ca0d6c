//! Sparse gradient accumulator mirroring the grid's data table.

use crate::grid::{Row, RowRemap, ROW_LEN};
use crate::scalar::Scalar;

/// Dense storage of per-row gradients plus the list of rows that received
/// any contribution since the last [`clear`](GradientBuffer::clear).
#[derive(Clone, Debug)]
pub struct GradientBuffer<T> {
    data: Vec<Row<T>>,
    touched: Vec<bool>,
    list: Vec<u32>,
}

impl<T: Scalar> GradientBuffer<T> {
    pub fn new(rows: usize) -> Self {
        Self {
            data: vec![[T::zero(); ROW_LEN]; rows],
            touched: vec![false; rows],
            list: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn mark(&mut self, row: usize) {
        if !self.touched[row] {
            self.touched[row] = true;
            self.list.push(row as u32);
        }
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut Row<T> {
        self.mark(row);
        &mut self.data[row]
    }

    #[inline]
    pub fn add(&mut self, row: usize, k: usize, g: T) {
        self.row_mut(row)[k] += g;
    }

    /// Adds `scale * upstream` to a row.
    #[inline]
    pub fn add_scaled(&mut self, row: usize, scale: T, upstream: &Row<T>) {
        let r = self.row_mut(row);
        for (a, &u) in r.iter_mut().zip(upstream) {
            *a += scale * u;
        }
    }

    #[inline]
    pub fn row(&self, row: usize) -> &Row<T> {
        &self.data[row]
    }

    /// Rows touched since the last clear, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.list
    }

    /// Fraction of rows carrying a nonzero gradient entry.
    pub fn nonzero_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self
            .list
            .iter()
            .filter(|&&r| self.data[r as usize].iter().any(|v| *v != T::zero()))
            .count();
        n as f64 / self.data.len() as f64
    }

    /// Zeroes touched rows only.
    pub fn clear(&mut self) {
        for &r in &self.list {
            self.data[r as usize] = [T::zero(); ROW_LEN];
            self.touched[r as usize] = false;
        }
        self.list.clear();
    }

    /// Adds another buffer of the same length into this one.
    pub fn merge(&mut self, other: &GradientBuffer<T>) {
        assert_eq!(self.len(), other.len(), "gradient buffers differ in length");
        for &r in &other.list {
            let src = other.data[r as usize];
            let dst = self.row_mut(r as usize);
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    /// Drops all contributions and resizes to `rows`.
    pub fn reset(&mut self, rows: usize) {
        self.clear();
        self.data.resize(rows, [T::zero(); ROW_LEN]);
        self.touched.resize(rows, false);
    }

    /// Re-indexes after a prune. Gradients of removed rows are discarded.
    pub fn remap(&mut self, remap: &RowRemap) {
        let mut next = GradientBuffer::new(remap.new_len());
        for &r in &self.list {
            if let Some(n) = remap.get(r as usize) {
                let row = self.data[r as usize];
                *next.row_mut(n) = row;
            }
        }
        *self = next;
    }
}
