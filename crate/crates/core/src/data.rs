//! In-memory datasets, feature normalization, splits and synthetic graphs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::graph::PreparedGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Undirected pairs `(u, v)` with `u < v`, sorted, no duplicates.
    pub edges: Vec<(usize, usize)>,
    pub class_count: usize,
    pub split: Option<Split>,
}

impl Dataset {
    /// Canonicalizes `edges` (orders each pair, sorts, dedups). Self-loops
    /// are rejected.
    pub fn new(features: Tensor, labels: Vec<usize>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(contract!("{} labels for {n} nodes", labels.len()));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::MalformedInput(alloc::format!("edge ({u}, {v}) out of range")));
            }
            if u == v {
                return Err(Error::MalformedInput(alloc::format!("self-loop at node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self { features, labels, edges: canon, class_count, split: None })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn graph(&self, renorm_trick: bool) -> Result<PreparedGraph> {
        PreparedGraph::from_pairs(&self.edges, self.n_nodes(), renorm_trick)
    }

    pub fn split(&self) -> Result<&Split> {
        self.split.as_ref().ok_or_else(|| contract!("dataset has no split"))
    }
}

/// Each row divided by its sum; all-zero rows stay zero.
pub fn row_normalize(features: &Tensor) -> Tensor {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    out
}

/// Train: the first `per_class_train` nodes of each class in node order.
/// Val: the next `n_val` unassigned nodes. Test: the last `n_test` nodes.
pub fn make_split(mut ds: Dataset, per_class_train: usize, n_val: usize, n_test: usize) -> Result<Dataset> {
    let n = ds.n_nodes();
    let mut taken = vec![0usize; ds.class_count];
    let mut assigned = vec![false; n];
    let mut train = Vec::new();
    for v in 0..n {
        let c = ds.labels[v];
        if taken[c] < per_class_train {
            taken[c] += 1;
            train.push(v);
            assigned[v] = true;
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < per_class_train) {
        return Err(contract!("class {c} has only {} nodes, {per_class_train} requested", taken[c]));
    }
    if n_test > n {
        return Err(contract!("{n_test} test nodes requested from {n}"));
    }
    let test: Vec<usize> = (n - n_test..n).collect();
    if test.iter().any(|&v| assigned[v]) {
        return Err(contract!("test range overlaps the training nodes"));
    }
    for &v in &test {
        assigned[v] = true;
    }
    let val: Vec<usize> = (0..n).filter(|&v| !assigned[v]).take(n_val).collect();
    if val.len() < n_val {
        return Err(contract!("only {} nodes left for {n_val} validation nodes", val.len()));
    }
    ds.split = Some(Split { train, val, test });
    Ok(ds)
}

/// Planted partition: `classes` communities of `per_class` nodes each (node
/// `v` belongs to community `v % classes`), intra-community edges with
/// probability `p_in`, inter-community edges with probability `p_out`.
/// Features are noisy class indicators over `n_features ≥ classes` columns;
/// `feature_noise` is the probability that each non-class column is on.
pub fn planted_partition<R: Rng + ?Sized>(
    classes: usize,
    per_class: usize,
    p_in: f64,
    p_out: f64,
    n_features: usize,
    feature_noise: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || n_features < classes {
        return Err(contract!("planted partition needs classes ≥ 1, per_class ≥ 1, n_features ≥ classes"));
    }
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|v| v % classes).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut x = Tensor::zeros(n, n_features);
    for v in 0..n {
        for f in 0..n_features {
            let on = if f % classes == labels[v] && f < classes { true } else { rng.gen::<f64>() < feature_noise };
            if on {
                x.set(v, f, 1.0);
            }
        }
    }
    Dataset::new(x, labels, edges)
}

/// Two dense clusters of `half` nodes joined by a single edge, with one-hot
/// cluster features. Nodes alternate between the clusters in node order.
pub fn two_clusters(half: usize) -> Result<Dataset> {
    let n = 2 * half;
    let labels: Vec<usize> = (0..n).map(|v| v % 2).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if labels[u] == labels[v] {
                edges.push((u, v));
            }
        }
    }
    edges.push((0, 1));
    let mut x = Tensor::zeros(n, 2);
    for v in 0..n {
        x.set(v, labels[v], 1.0);
    }
    Dataset::new(x, labels, edges)
}
