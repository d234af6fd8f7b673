use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{contract, Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(contract!("ragged rows in Tensor::from_rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Dense product `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch { op: "matmul", left: self.shape(), right: rhs.shape() });
        }
        Ok(matmul_slice(self, rhs, &Inner::same(0..self.cols)))
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Contiguous inner-dimension slice of a product: `x[:, x_start..x_start+len]`
/// times `w[w_start..w_start+len, :]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Inner {
    pub x_start: usize,
    pub w_start: usize,
    pub len: usize,
}

impl Inner {
    pub fn same(k: Range<usize>) -> Self {
        Self { x_start: k.start, w_start: k.start, len: k.len() }
    }
}

/// `x[:, k] · w[k, :]` over the inner slice described by `k`.
///
/// Zero entries of `x` are skipped, so sparse bag-of-words feature matrices
/// cost proportional to their nonzeros.
pub(crate) fn matmul_slice(x: &Tensor, w: &Tensor, k: &Inner) -> Tensor {
    let n = x.rows;
    let m = w.cols;
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let xrow = &x.data[i * x.cols + k.x_start..i * x.cols + k.x_start + k.len];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (kk, &a) in xrow.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = k.w_start + kk;
            let wrow = &w.data[wr * m..(wr + 1) * m];
            for (o, &b) in orow.iter_mut().zip(wrow) {
                *o += a * b;
            }
        }
    }
    out
}

/// Accumulates `g · w[k, :]ᵀ` into `dx[:, k]`.
pub(crate) fn matmul_slice_grad_x(g: &Tensor, w: &Tensor, k: &Inner, dx: &mut Tensor) {
    let m = w.cols;
    for i in 0..g.rows {
        let grow = &g.data[i * m..(i + 1) * m];
        for kk in 0..k.len {
            let wr = k.w_start + kk;
            let wrow = &w.data[wr * m..(wr + 1) * m];
            let mut acc = 0.0;
            for (a, b) in grow.iter().zip(wrow) {
                acc += a * b;
            }
            dx.data[i * dx.cols + k.x_start + kk] += acc;
        }
    }
}

/// Accumulates `x[:, k]ᵀ · g` into `dw[k, :]`.
pub(crate) fn matmul_slice_grad_w(x: &Tensor, g: &Tensor, k: &Inner, dw: &mut Tensor) {
    let m = g.cols;
    for i in 0..x.rows {
        let xrow = &x.data[i * x.cols + k.x_start..i * x.cols + k.x_start + k.len];
        let grow = &g.data[i * m..(i + 1) * m];
        for (kk, &a) in xrow.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = k.w_start + kk;
            let drow = &mut dw.data[wr * m..(wr + 1) * m];
            for (d, &b) in drow.iter_mut().zip(grow) {
                *d += a * b;
            }
        }
    }
}
