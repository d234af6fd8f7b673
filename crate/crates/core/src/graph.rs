//! Sparse graph representation and the products used by every GCN layer.
//!
//! Adjacency matrices are stored in CSR form with strictly increasing column
//! indices inside each row. Masked products iterate nonzeros in storage
//! order, so a mask is simply a vector aligned with `values`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Validates and assembles a CSR matrix.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n_rows + 1 || row_ptr[0] != 0 {
            return Err(Error::MalformedInput("row_ptr must have n_rows+1 entries starting at 0".into()));
        }
        if row_ptr[n_rows] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::MalformedInput("row_ptr[n_rows] must equal nnz".into()));
        }
        for r in 0..n_rows {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(Error::MalformedInput("row_ptr must be non-decreasing".into()));
            }
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::MalformedInput(alloc::format!(
                    "row {r}: columns must be strictly increasing and < {n_cols}"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedInput("non-finite matrix value".into()));
        }
        Ok(Self { n_rows, n_cols, row_ptr, col_idx, values })
    }

    /// Square matrix with ones on the diagonal.
    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Converts a dense matrix, dropping exact zeros.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut row_ptr = Vec::with_capacity(t.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n_rows: t.rows(), n_cols: t.cols(), row_ptr, col_idx, values }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
    #[inline]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }
    #[inline]
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row_range(&self, r: usize) -> Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Storage index of entry `(r, c)`, if present.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        self.col_idx[range.clone()].binary_search(&c).ok().map(|i| range.start + i)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |i| self.values[i])
    }

    /// `(row, col)` of every nonzero in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row_range(r).map(move |i| (r, self.col_idx[i], self.values[i])))
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.entries().all(|(r, c, v)| self.position(c, r).is_some_and(|j| self.values[j] == v))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.entries() {
            t.set(r, c, v);
        }
        t
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(contract!("value vector length {} != nnz {}", values.len(), self.nnz()));
        }
        Ok(Self { values, ..self.clone() })
    }
}

/// Per-node neighbor counts of a symmetric binary adjacency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeVector(pub Vec<usize>);

impl DegreeVector {
    pub fn of(adj: &SparseMatrix) -> Self {
        DegreeVector((0..adj.n_rows()).map(|r| adj.row_range(r).len()).collect())
    }
}

/// The nonzero pattern of a normalized adjacency: graph edges in both
/// directions plus every self-loop.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Storage index of the transposed entry.
    reverse: Vec<usize>,
}

impl EdgeSet {
    pub fn from_pattern(a: &SparseMatrix) -> Result<Self> {
        if a.n_rows() != a.n_cols() {
            return Err(contract!("edge set requires a square matrix"));
        }
        let mut rows = Vec::with_capacity(a.nnz());
        let mut cols = Vec::with_capacity(a.nnz());
        let mut reverse = Vec::with_capacity(a.nnz());
        for (r, c, _) in a.entries() {
            let rev = a
                .position(c, r)
                .ok_or_else(|| contract!("pattern is not symmetric at ({r}, {c})"))?;
            rows.push(r);
            cols.push(c);
            reverse.push(rev);
        }
        for v in 0..a.n_rows() {
            if a.position(v, v).is_none() {
                return Err(contract!("edge set is missing self-loop ({v}, {v})"));
            }
        }
        Ok(Self { n: a.n_rows(), rows, cols, reverse })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
    #[inline]
    pub fn row(&self, e: usize) -> usize {
        self.rows[e]
    }
    #[inline]
    pub fn col(&self, e: usize) -> usize {
        self.cols[e]
    }
    #[inline]
    pub fn reverse(&self, e: usize) -> usize {
        self.reverse[e]
    }
    #[inline]
    pub fn is_self_loop(&self, e: usize) -> bool {
        self.rows[e] == self.cols[e]
    }
    /// True for the canonical representative `(u, v)` with `u <= v`.
    #[inline]
    pub fn is_canonical(&self, e: usize) -> bool {
        self.rows[e] <= self.cols[e]
    }
}

/// Binary adjacency from a node-pair list. Duplicates and self-pairs are
/// dropped.
pub fn build_adjacency(edges: &[(usize, usize)], n: usize, symmetrize: bool) -> Result<SparseMatrix> {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::MalformedInput(alloc::format!("edge ({u}, {v}) out of range for {n} nodes")));
        }
        if u == v {
            continue;
        }
        pairs.push((u, v));
        if symmetrize {
            pairs.push((v, u));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(from_sorted_pairs(n, &pairs, |_, _| 1.0))
}

fn from_sorted_pairs(n: usize, pairs: &[(usize, usize)], value: impl Fn(usize, usize) -> f64) -> SparseMatrix {
    let mut row_ptr = vec![0usize; n + 1];
    for &(r, _) in pairs {
        row_ptr[r + 1] += 1;
    }
    for r in 0..n {
        row_ptr[r + 1] += row_ptr[r];
    }
    let col_idx = pairs.iter().map(|&(_, c)| c).collect();
    let values = pairs.iter().map(|&(r, c)| value(r, c)).collect();
    SparseMatrix { n_rows: n, n_cols: n, row_ptr, col_idx, values }
}

fn check_plain_adjacency(a: &SparseMatrix) -> Result<()> {
    if !a.is_symmetric() {
        return Err(contract!("normalization requires a symmetric adjacency"));
    }
    if (0..a.n_rows()).any(|v| a.position(v, v).is_some()) {
        return Err(contract!("normalization requires a zero diagonal"));
    }
    Ok(())
}

fn with_diagonal(a: &SparseMatrix) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = a.entries().map(|(r, c, _)| (r, c)).collect();
    pairs.extend((0..a.n_rows()).map(|v| (v, v)));
    pairs.sort_unstable();
    pairs
}

/// `I + D^{-1/2} A D^{-1/2}`. Isolated nodes keep a unit diagonal.
pub fn normalize(a: &SparseMatrix) -> Result<SparseMatrix> {
    check_plain_adjacency(a)?;
    let deg = DegreeVector::of(a).0;
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / libm::sqrt(d as f64) }).collect();
    let pairs = with_diagonal(a);
    Ok(from_sorted_pairs(a.n_rows(), &pairs, |r, c| {
        if r == c {
            1.0
        } else {
            inv_sqrt[r] * inv_sqrt[c]
        }
    }))
}

/// Renormalized variant `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃ = D + I`.
pub fn normalize_renorm(a: &SparseMatrix) -> Result<SparseMatrix> {
    check_plain_adjacency(a)?;
    let deg = DegreeVector::of(a).0;
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / libm::sqrt(d as f64 + 1.0)).collect();
    let pairs = with_diagonal(a);
    Ok(from_sorted_pairs(a.n_rows(), &pairs, |r, c| inv_sqrt[r] * inv_sqrt[c]))
}

/// Exact `A · H`.
pub fn spmm(a: &SparseMatrix, h: &Tensor) -> Result<Tensor> {
    if a.n_cols() != h.rows() {
        return Err(Error::ShapeMismatch { op: "spmm", left: (a.n_rows(), a.n_cols()), right: h.shape() });
    }
    Ok(spmm_kernel(a, None, h, 0..h.cols()))
}

/// `(A ⊙ mask) · H` where `mask` is aligned with the stored nonzeros of `A`.
pub fn masked_spmm(a: &SparseMatrix, mask: &[f64], h: &Tensor) -> Result<Tensor> {
    check_mask(a, mask)?;
    if a.n_cols() != h.rows() {
        return Err(Error::ShapeMismatch { op: "masked_spmm", left: (a.n_rows(), a.n_cols()), right: h.shape() });
    }
    Ok(spmm_kernel(a, Some(mask), h, 0..h.cols()))
}

pub(crate) fn check_mask(a: &SparseMatrix, mask: &[f64]) -> Result<()> {
    if mask.len() != a.nnz() {
        return Err(contract!("mask length {} != nnz {}", mask.len(), a.nnz()));
    }
    if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(contract!("mask values must lie in [0, 1]"));
    }
    Ok(())
}

/// Row kernel shared by plain and masked products; `cols` selects a
/// contiguous column slice of `h`.
pub(crate) fn spmm_kernel(a: &SparseMatrix, mask: Option<&[f64]>, h: &Tensor, cols: Range<usize>) -> Tensor {
    let width = cols.len();
    let mut out = Tensor::zeros(a.n_rows(), width);
    for r in 0..a.n_rows() {
        let orow = out.row_mut(r);
        for i in a.row_range(r) {
            let mut w = a.values[i];
            if let Some(m) = mask {
                w *= m[i];
            }
            if w == 0.0 {
                continue;
            }
            let hrow = &h.row(a.col_idx[i])[cols.clone()];
            for (o, &x) in orow.iter_mut().zip(hrow) {
                *o += w * x;
            }
        }
    }
    out
}

/// Result of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 1000;

/// Magnitude of the dominant eigenvalue of a symmetric matrix.
///
/// Starts from the all-ones vector and tracks `‖A x‖ / ‖x‖`, which converges
/// to `|λ_max|` even when `±λ_max` are both eigenvalues (bipartite graphs).
pub fn lambda_max(a: &SparseMatrix, tol: f64, max_iter: usize) -> Result<SpectralEstimate> {
    if a.n_rows() != a.n_cols() {
        return Err(contract!("lambda_max requires a square matrix"));
    }
    if !(tol > 0.0) {
        return Err(contract!("tolerance must be positive"));
    }
    let n = a.n_rows();
    if n == 0 {
        return Ok(SpectralEstimate { value: 0.0, converged: true, iterations: 0 });
    }
    let mut x = Tensor::full(n, 1, 1.0 / libm::sqrt(n as f64));
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let y = spmm_kernel(a, None, &x, 0..1);
        let norm = libm::sqrt(y.frobenius_sq());
        if norm == 0.0 {
            return Ok(SpectralEstimate { value: 0.0, converged: true, iterations: it });
        }
        if (norm - prev).abs() <= tol * norm {
            return Ok(SpectralEstimate { value: norm, converged: true, iterations: it });
        }
        prev = norm;
        x = y.map(|v| v / norm);
    }
    Ok(SpectralEstimate { value: prev, converged: false, iterations: max_iter })
}

/// A graph ready for the model: the raw binary adjacency, its normalized
/// form and the edge set the masks are aligned with.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    raw: SparseMatrix,
    norm: SparseMatrix,
    edges: EdgeSet,
    renorm_trick: bool,
    /// Raw adjacency value at every stored entry of `norm` (0 on the diagonal).
    raw_at: Vec<f64>,
}

impl PreparedGraph {
    pub fn new(raw: SparseMatrix, renorm_trick: bool) -> Result<Self> {
        let norm = if renorm_trick { normalize_renorm(&raw)? } else { normalize(&raw)? };
        let edges = EdgeSet::from_pattern(&norm)?;
        let raw_at = norm.entries().map(|(r, c, _)| raw.get(r, c)).collect();
        Ok(Self { raw, norm, edges, renorm_trick, raw_at })
    }

    pub fn from_pairs(pairs: &[(usize, usize)], n: usize, renorm_trick: bool) -> Result<Self> {
        Self::new(build_adjacency(pairs, n, true)?, renorm_trick)
    }

    pub fn raw(&self) -> &SparseMatrix {
        &self.raw
    }

    pub fn norm(&self) -> &SparseMatrix {
        &self.norm
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.n_rows()
    }

    /// Normalization applied after masking the raw adjacency with `z`
    /// (aligned with the edge set). Masked-out degree is removed before
    /// normalizing; nodes left without neighbours keep only their self term.
    pub fn renormalize_masked(&self, z: &[f64]) -> Result<SparseMatrix> {
        check_mask(&self.norm, z)?;
        let n = self.n_nodes();
        let self_weight = if self.renorm_trick { 1.0 } else { 0.0 };
        let mut deg = vec![0.0; n];
        for (e, (r, c, _)) in self.norm.entries().enumerate() {
            let a = if r == c { self_weight } else { self.raw_at[e] };
            deg[r] += a * z[e];
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / libm::sqrt(d) } else { 0.0 }).collect();
        let values = self
            .norm
            .entries()
            .enumerate()
            .map(|(e, (r, c, _))| {
                if r == c && !self.renorm_trick {
                    z[e]
                } else {
                    let a = if r == c { self_weight } else { self.raw_at[e] };
                    a * z[e] * inv_sqrt[r] * inv_sqrt[c]
                }
            })
            .collect();
        self.norm.with_values(values)
    }
}
