//! Reverse-mode differentiation over the fixed set of operations a GCN
//! forward pass needs.
//!
//! A [`Tape`] is rebuilt for every step. Nodes are appended in evaluation
//! order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Only nodes that depend on a
//! parameter carry adjoints; constants (features, masks, the adjacency)
//! never get gradient buffers.

use alloc::borrow::Cow;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{contract, Error, Result};
use crate::graph::{check_mask, spmm_kernel, SparseMatrix};
use crate::math::{logit, sigmoid};
use crate::tensor::{matmul_slice, matmul_slice_grad_w, matmul_slice_grad_x, Inner, Tensor};
use crate::variational::{kl_kuma_beta_grad, kuma_sample_grad, BetaPrior, KlVariant};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Edge weights applied inside a masked sparse product.
#[derive(Debug, Clone)]
pub enum EdgeWeights<'a> {
    /// All ones: a plain sparse product.
    Ones,
    /// Fixed keep values (binary draws or expected keep probabilities).
    Fixed(Cow<'a, [f64]>),
    /// Relaxed values recorded on the tape; gradients flow into them.
    Recorded(Var),
}

#[derive(Debug)]
enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    MatMul { x: Var, w: Var, k: Inner },
    MaskedSpmm { adj: Cow<'a, SparseMatrix>, mask: EdgeWeights<'a>, h: Var, cols: Range<usize> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRowBias(Var, Var),
    FrobeniusSq(Var),
    LogSoftmaxRows(Var),
    MaskedNll { logp: Var, labels: &'a [usize], observed: &'a [usize] },
    Logit(Var),
    Broadcast { x: Var, scale: f64 },
    Fill { x: Var, positions: Vec<usize> },
    Kumaraswamy { log_a: Var, log_b: Var, d_log_a: f64, d_log_b: f64 },
    KlKumaBeta { log_a: Var, log_b: Var, d_log_a: f64, d_log_b: f64 },
}

#[derive(Debug)]
struct Node<'a> {
    value: Value<'a>,
    op: Op<'a>,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("recorded tensor"));
        }
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf that borrows its data (e.g. the feature matrix).
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    #[inline]
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let inner = self.value(x).cols();
        self.matmul_slice(x, w, 0..inner)
    }

    /// `x[:, k] · w[k, :]`.
    pub fn matmul_slice(&mut self, x: Var, w: Var, k: Range<usize>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(Error::ShapeMismatch { op: "matmul", left: xv.shape(), right: wv.shape() });
        }
        if k.end > xv.cols() || k.start > k.end {
            return Err(contract!("matmul slice {k:?} outside inner dimension {}", xv.cols()));
        }
        self.matmul_inner(x, w, Inner::same(k))
    }

    /// `x · w[rows, :]` where `x` has exactly `rows.len()` columns.
    pub fn matmul_rows(&mut self, x: Var, w: Var, rows: Range<usize>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if rows.end > wv.rows() || rows.start > rows.end || xv.cols() != rows.len() {
            return Err(Error::ShapeMismatch { op: "matmul_rows", left: xv.shape(), right: (rows.len(), wv.cols()) });
        }
        self.matmul_inner(x, w, Inner { x_start: 0, w_start: rows.start, len: rows.len() })
    }

    fn matmul_inner(&mut self, x: Var, w: Var, k: Inner) -> Result<Var> {
        let out = matmul_slice(self.value(x), self.value(w), &k);
        let ng = self.needs_grad(x) || self.needs_grad(w);
        self.push(out, Op::MatMul { x, w, k }, ng)
    }

    /// `(adj ⊙ mask) · h[:, cols]`.
    pub fn masked_spmm(
        &mut self,
        adj: &'a SparseMatrix,
        mask: EdgeWeights<'a>,
        h: Var,
        cols: Range<usize>,
    ) -> Result<Var> {
        let hv = self.value(h);
        if adj.n_cols() != hv.rows() {
            return Err(Error::ShapeMismatch { op: "masked_spmm", left: (adj.n_rows(), adj.n_cols()), right: hv.shape() });
        }
        if cols.end > hv.cols() || cols.start > cols.end {
            return Err(contract!("column slice {cols:?} outside width {}", hv.cols()));
        }
        let mut ng = self.needs_grad(h);
        let out = match &mask {
            EdgeWeights::Ones => spmm_kernel(adj, None, hv, cols.clone()),
            EdgeWeights::Fixed(m) => {
                check_mask(adj, m)?;
                spmm_kernel(adj, Some(m), hv, cols.clone())
            }
            EdgeWeights::Recorded(mv) => {
                let m = self.value(*mv);
                check_mask(adj, m.data())?;
                ng |= self.needs_grad(*mv);
                spmm_kernel(adj, Some(m.data()), hv, cols.clone())
            }
        };
        self.push(out, Op::MaskedSpmm { adj: Cow::Borrowed(adj), mask, h, cols }, ng)
    }

    /// `adj · h[:, cols]` for a matrix built during the step (e.g. an
    /// adjacency renormalized after masking). The tape takes ownership.
    pub fn spmm_owned(&mut self, adj: SparseMatrix, h: Var, cols: Range<usize>) -> Result<Var> {
        let hv = self.value(h);
        if adj.n_cols() != hv.rows() {
            return Err(Error::ShapeMismatch { op: "spmm", left: (adj.n_rows(), adj.n_cols()), right: hv.shape() });
        }
        if cols.end > hv.cols() || cols.start > cols.end {
            return Err(contract!("column slice {cols:?} outside width {}", hv.cols()));
        }
        let out = spmm_kernel(&adj, None, hv, cols.clone());
        let ng = self.needs_grad(h);
        self.push(out, Op::MaskedSpmm { adj: Cow::Owned(adj), mask: EdgeWeights::Ones, h, cols }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs_grad(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs_grad(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch { op: "add", left: av.shape(), right: bv.shape() });
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += y;
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| c * v);
        let ng = self.needs_grad(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.len() {
            return Err(contract!("mul_const factor length {} != {}", factor.len(), xv.len()));
        }
        let mut out = xv.clone();
        for (o, &f) in out.data_mut().iter_mut().zip(&factor) {
            *o *= f;
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::MulConst(x, factor), ng)
    }

    /// Adds a `1 × m` bias to every row of an `n × m` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch { op: "add_row_bias", left: xv.shape(), right: bv.shape() });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        self.push(out, Op::AddRowBias(x, bias), ng)
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).frobenius_sq());
        let ng = self.needs_grad(x);
        self.push(out, Op::FrobeniusSq(x), ng)
    }

    /// Max-subtracted row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// Mean negative log-likelihood over the `observed` rows.
    pub fn masked_nll(&mut self, logp: Var, labels: &'a [usize], observed: &'a [usize]) -> Result<Var> {
        if observed.is_empty() {
            return Err(contract!("masked_nll needs at least one observed node"));
        }
        let lp = self.value(logp);
        if labels.len() != lp.rows() {
            return Err(contract!("label count {} != rows {}", labels.len(), lp.rows()));
        }
        let mut total = 0.0;
        for &v in observed {
            if v >= lp.rows() || labels[v] >= lp.cols() {
                return Err(contract!("observed node {v} or its label is out of range"));
            }
            total -= lp.get(v, labels[v]);
        }
        let ng = self.needs_grad(logp);
        self.push(Tensor::scalar(total / observed.len() as f64), Op::MaskedNll { logp, labels, observed }, ng)
    }

    /// Elementwise `log(x / (1 - x))`.
    pub fn logit(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(contract!("logit needs values strictly inside (0, 1)"));
        }
        let out = xv.map(logit);
        let ng = self.needs_grad(x);
        self.push(out, Op::Logit(x), ng)
    }

    /// `out_e = scale · x + offsets_e` for a scalar `x`; output is `1 × len`.
    pub fn broadcast_affine(&mut self, x: Var, scale: f64, offsets: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(contract!("broadcast_affine needs a scalar input"));
        }
        let base = scale * xv.item();
        let out = Tensor::from_vec(1, offsets.len(), offsets.iter().map(|&o| base + o).collect())?;
        let ng = self.needs_grad(x);
        self.push(out, Op::Broadcast { x, scale }, ng)
    }

    /// Overwrites the listed positions with `value`; they pass no gradient.
    pub fn fill(&mut self, x: Var, positions: Vec<usize>, value: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        for &p in &positions {
            if p >= out.len() {
                return Err(contract!("fill position {p} out of range"));
            }
            out.data_mut()[p] = value;
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::Fill { x, positions }, ng)
    }

    /// Reparameterized Kumaraswamy draw `(1 - u^{1/b})^{1/a}` with
    /// `a = exp(log_a)`, `b = exp(log_b)`.
    pub fn kumaraswamy(&mut self, log_a: Var, log_b: Var, u: f64) -> Result<Var> {
        let (la, lb) = (self.value(log_a).item(), self.value(log_b).item());
        let (a, b) = (libm::exp(la), libm::exp(lb));
        let s = kuma_sample_grad(a, b, u);
        let op = Op::Kumaraswamy { log_a, log_b, d_log_a: s.d_a * a, d_log_b: s.d_b * b };
        let ng = self.needs_grad(log_a) || self.needs_grad(log_b);
        self.push(Tensor::scalar(s.pi), op, ng)
    }

    /// KL from the Kumaraswamy posterior to the beta prior, in log-parameters.
    pub fn kl_kuma_beta(&mut self, log_a: Var, log_b: Var, prior: BetaPrior, variant: KlVariant) -> Result<Var> {
        let (a, b) = (libm::exp(self.value(log_a).item()), libm::exp(self.value(log_b).item()));
        let (kl, da, db) = kl_kuma_beta_grad(a, b, prior, variant);
        let op = Op::KlKumaBeta { log_a, log_b, d_log_a: da * a, d_log_b: db * b };
        let ng = self.needs_grad(log_a) || self.needs_grad(log_b);
        self.push(Tensor::scalar(kl), op, ng)
    }

    /// Reverse sweep from a scalar terminal.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract!("backward needs a scalar terminal"));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul { x, w, k } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs_grad(*x) {
                        matmul_slice_grad_x(&g, wv, k, self.slot(&mut adj, *x));
                    }
                    if self.needs_grad(*w) {
                        matmul_slice_grad_w(xv, &g, k, self.slot(&mut adj, *w));
                    }
                }
                Op::MaskedSpmm { adj: a, mask, h, cols } => {
                    let weights: Option<&[f64]> = match mask {
                        EdgeWeights::Ones => None,
                        EdgeWeights::Fixed(m) => Some(m),
                        EdgeWeights::Recorded(mv) => Some(self.value(*mv).data()),
                    };
                    if self.needs_grad(*h) {
                        let dh = self.slot(&mut adj, *h);
                        for r in 0..a.n_rows() {
                            let grow = g.row(r);
                            for e in a.row_range(r) {
                                let wgt = a.values()[e] * weights.map_or(1.0, |m| m[e]);
                                if wgt == 0.0 {
                                    continue;
                                }
                                let drow = &mut dh.row_mut(a.col_idx()[e])[cols.clone()];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += wgt * gv;
                                }
                            }
                        }
                    }
                    if let EdgeWeights::Recorded(mv) = mask {
                        if self.needs_grad(*mv) {
                            let hv = self.value(*h);
                            let dm = self.slot(&mut adj, *mv);
                            for r in 0..a.n_rows() {
                                let grow = g.row(r);
                                for e in a.row_range(r) {
                                    let hrow = &hv.row(a.col_idx()[e])[cols.clone()];
                                    let dot: f64 = grow.iter().zip(hrow).map(|(x, y)| x * y).sum();
                                    dm.data_mut()[e] += a.values()[e] * dot;
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = self.slot(&mut adj, *x);
                    for ((d, &gv), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let out = node.value.get();
                    let dx = self.slot(&mut adj, *x);
                    for ((d, &gv), &s) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs_grad(v) {
                            accumulate(self.slot(&mut adj, v), &g, 1.0);
                        }
                    }
                }
                Op::Scale(x, c) => accumulate(self.slot(&mut adj, *x), &g, *c),
                Op::MulConst(x, factor) => {
                    let dx = self.slot(&mut adj, *x);
                    for ((d, &gv), &f) in dx.data_mut().iter_mut().zip(g.data()).zip(factor) {
                        *d += gv * f;
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.needs_grad(*x) {
                        accumulate(self.slot(&mut adj, *x), &g, 1.0);
                    }
                    if self.needs_grad(*bias) {
                        let db = self.slot(&mut adj, *bias);
                        for r in 0..g.rows() {
                            for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::FrobeniusSq(x) => {
                    let gs = g.item();
                    let xv = self.value(*x);
                    let dx = self.slot(&mut adj, *x);
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d += 2.0 * gs * v;
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    let out = node.value.get();
                    let dx = self.slot(&mut adj, *x);
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let drow = dx.row_mut(r);
                        for ((d, &gv), &lp) in drow.iter_mut().zip(g.row(r)).zip(out.row(r)) {
                            *d += gv - libm::exp(lp) * gsum;
                        }
                    }
                }
                Op::MaskedNll { logp, labels, observed } => {
                    let scale = -g.item() / observed.len() as f64;
                    let dl = self.slot(&mut adj, *logp);
                    let cols = dl.cols();
                    for &v in observed.iter() {
                        dl.data_mut()[v * cols + labels[v]] += scale;
                    }
                }
                Op::Logit(x) => {
                    let xv = self.value(*x);
                    let dx = self.slot(&mut adj, *x);
                    for ((d, &gv), &p) in dx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += gv / (p * (1.0 - p));
                    }
                }
                Op::Broadcast { x, scale } => {
                    let total: f64 = g.data().iter().sum();
                    self.slot(&mut adj, *x).data_mut()[0] += scale * total;
                }
                Op::Fill { x, positions } => {
                    let mut gg = g;
                    for &p in positions {
                        gg.data_mut()[p] = 0.0;
                    }
                    accumulate(self.slot(&mut adj, *x), &gg, 1.0);
                }
                Op::Kumaraswamy { log_a, log_b, d_log_a, d_log_b }
                | Op::KlKumaBeta { log_a, log_b, d_log_a, d_log_b } => {
                    let gs = g.item();
                    if self.needs_grad(*log_a) {
                        self.slot(&mut adj, *log_a).data_mut()[0] += gs * d_log_a;
                    }
                    if self.needs_grad(*log_b) {
                        self.slot(&mut adj, *log_b).data_mut()[0] += gs * d_log_b;
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.get().shape()).collect();
        let leaf = self.nodes.iter().map(|n| matches!(n.op, Op::Leaf) && n.needs_grad).collect::<Vec<_>>();
        let grads = adj
            .into_iter()
            .zip(&leaf)
            .map(|(g, &is_param)| if is_param { g } else { None })
            .collect();
        let grads = Gradients { grads, shapes };
        if grads.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(grads)
    }

    fn slot<'s>(&self, adj: &'s mut [Option<Tensor>], v: Var) -> &'s mut Tensor {
        let shape = self.value(v).shape();
        adj[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor, c: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += c * s;
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Scalar gradient for a 1x1 parameter.
    pub fn scalar(&self, v: Var) -> f64 {
        self.grads[v.0].as_ref().map_or(0.0, |g| g.item())
    }
}

/// Convenience for building constant 1xN vectors on a tape.
pub fn row_vector(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::from_vec(1, n, values).expect("length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::graph::{build_adjacency, normalize};

    #[test]
    fn matmul_identity_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::identity(3));
        let w = t.param(Tensor::from_vec(3, 2, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let y = t.matmul(x, w).unwrap();
        assert_eq!(t.value(y), t.value(w));
        // sum(output) = frobenius of ones-weighted; use scale+broadcast: sum via nll is awkward, use dot with ones
        let ones = t.constant(Tensor::full(2, 1, 1.0));
        let s = t.matmul(y, ones).unwrap();
        let ones_row = t.constant(Tensor::full(1, 3, 1.0));
        let total = t.matmul(ones_row, s).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.wrt(w), Tensor::full(3, 2, 1.0));
        assert!(g.get(x).is_none());
    }

    #[test]
    fn scalar_product_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let w = t.param(Tensor::scalar(-2.0));
        let y = t.matmul(x, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(w), 3.0);
        assert_eq!(g.scalar(x), -2.0);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(1, 2, vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);

        let z = t.param(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        let g = t.backward(s).unwrap();
        assert_eq!(g.scalar(z), 0.25);

        let mut t = Tape::new();
        let i2 = t.param(Tensor::identity(2));
        let f = t.frobenius_sq(i2).unwrap();
        assert_eq!(t.value(f).item(), 2.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(i2), Tensor::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(1, 3, vec![0.0, -0.5, 0.5]).unwrap());
        let r = t.relu(x).unwrap();
        let f = t.frobenius_sq(r).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_softmax_known_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(2, 2, vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
        let y = t.log_softmax_rows(x).unwrap();
        let v = t.value(y);
        let ln2 = core::f64::consts::LN_2;
        assert!((v.get(0, 0) + ln2).abs() < 1e-15 && (v.get(0, 1) + ln2).abs() < 1e-15);
        assert!(v.get(1, 0).abs() < 1e-12);
        assert!((v.get(1, 1) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn nll_examples() {
        let labels = [0usize, 1, 2];
        let observed = [0usize, 2];
        let mut t = Tape::new();
        let lp = t.constant(Tensor::full(3, 3, -0.1));
        let l = t.masked_nll(lp, &labels, &observed).unwrap();
        assert!((t.value(l).item() - 0.1).abs() < 1e-15);
        let c = 7.0f64;
        let uni = t.constant(Tensor::full(3, 7, -libm::log(c)));
        let l = t.masked_nll(uni, &labels, &observed).unwrap();
        assert!((t.value(l).item() - libm::log(c)).abs() < 1e-15);
        assert!(t.masked_nll(uni, &labels, &[]).is_err());
    }

    #[test]
    fn backward_unused_param_is_zero() {
        let mut t = Tape::new();
        let w = t.param(Tensor::full(2, 2, 1.0));
        let v = t.param(Tensor::full(1, 3, 2.0));
        let f = t.frobenius_sq(w).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(v), Tensor::zeros(1, 3));
        assert_eq!(g.wrt(w), Tensor::full(2, 2, 2.0));
        let r = t.relu(w).unwrap();
        assert!(t.backward(r).is_err());
    }

    #[test]
    fn masked_spmm_zero_h_gives_zero_mask_grad() {
        let a = normalize(&build_adjacency(&[(0, 1), (1, 2)], 3, true).unwrap()).unwrap();
        let mut t = Tape::new();
        let h = t.constant(Tensor::zeros(3, 2));
        let m = t.param(row_vector(vec![0.5; a.nnz()]));
        let y = t.masked_spmm(&a, EdgeWeights::Recorded(m), h, 0..2).unwrap();
        assert_eq!(t.value(y), &Tensor::zeros(3, 2));
        let f = t.frobenius_sq(y).unwrap();
        let g = t.backward(f).unwrap();
        assert!(g.wrt(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alignment_mismatch_is_rejected() {
        let a = normalize(&build_adjacency(&[(0, 1)], 2, true).unwrap()).unwrap();
        let mut t = Tape::new();
        let h = t.constant(Tensor::zeros(2, 1));
        let m = t.param(row_vector(vec![1.0; 3]));
        assert!(t.masked_spmm(&a, EdgeWeights::Recorded(m), h, 0..1).is_err());
    }
}
