//! Flat row-major containers for per-state tables.

use serde::{Deserialize, Serialize};

/// Dense `rows x cols` matrix of `f64`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Table2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ncols));
        Self {
            rows: nrows,
            cols: ncols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Sup-norm distance to another table of identical shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense `dim0 x dim1 x dim2` tensor of `f64`; the innermost axis is
/// contiguous so `slab(i, j)` is a `&[f64]` of length `dim2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    dim0: usize,
    dim1: usize,
    dim2: usize,
    data: Vec<f64>,
}

impl Table3 {
    pub fn zeros(dim0: usize, dim1: usize, dim2: usize) -> Self {
        Self {
            dim0,
            dim1,
            dim2,
            data: vec![0.0; dim0 * dim1 * dim2],
        }
    }

    pub fn empty() -> Self {
        Self::zeros(0, 0, 0)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.dim0, self.dim1, self.dim2)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn slab(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.dim1 + j) * self.dim2;
        &self.data[base..base + self.dim2]
    }

    #[inline]
    pub fn slab_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let base = (i * self.dim1 + j) * self.dim2;
        &mut self.data[base..base + self.dim2]
    }

    /// All slabs of the leading index as one contiguous slice.
    #[inline]
    pub fn plane(&self, i: usize) -> &[f64] {
        let len = self.dim1 * self.dim2;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[i] += scale * rhs[i]` over equal-length slices.
#[inline]
pub fn axpy(out: &mut [f64], scale: f64, rhs: &[f64]) {
    debug_assert_eq!(out.len(), rhs.len());
    for (o, r) in out.iter_mut().zip(rhs) {
        *o += scale * r;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_access_round_trips() {
        let mut t = Table2::zeros(3, 2);
        t.set(1, 1, 4.5);
        assert_eq!(t.row(1), &[0.0, 4.5]);
        assert_eq!(t.get(1, 1), 4.5);
    }

    #[test]
    fn slab_layout_is_contiguous() {
        let mut t = Table3::zeros(2, 2, 3);
        t.slab_mut(1, 0).copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(t.slab(1, 0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.plane(1)[..3], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn max_abs_diff_finds_largest_gap() {
        let a = Table2::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut b = a.clone();
        b.set(0, 1, 2.5);
        assert_eq!(a.max_abs_diff(&b), 0.5);
    }
}
