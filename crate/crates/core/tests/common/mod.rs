//! Dense reference implementations shared by the integration tests. Nothing
//! here calls into the sparse kernels.
#![allow(dead_code)]

use gdc_core::model::{forward, record_params, DropParam, GcnConfig, LayerMasks, LayerParams};
use gdc_core::{EdgeSet, PreparedGraph, Tape, Tensor};
use rand::Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Dense {
    vec![vec![0.0; c]; r]
}

pub fn random(rng: &mut impl Rng, r: usize, c: usize) -> Dense {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(d: &Dense) -> Tensor {
    let rows: Vec<&[f64]> = d.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `I + D^{-1/2} A D^{-1/2}` from an undirected pair list.
pub fn dense_norm(n: usize, pairs: &[(usize, usize)]) -> Dense {
    let mut a = zeros(n, n);
    for &(u, v) in pairs {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut out = zeros(n, n);
    for i in 0..n {
        out[i][i] = 1.0;
        for j in 0..n {
            if a[i][j] != 0.0 {
                out[i][j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn hadamard(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect()).collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn cols(a: &Dense, r: std::ops::Range<usize>) -> Dense {
    a.iter().map(|row| row[r.clone()].to_vec()).collect()
}

pub fn rows(a: &Dense, r: std::ops::Range<usize>) -> Dense {
    a[r].to_vec()
}

pub fn relu(a: &Dense) -> Dense {
    a.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn log_softmax(a: &Dense) -> Dense {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.iter().map(|v| v - lse).collect()
        })
        .collect()
}

/// Contiguous near-equal groups, the first `width % n` one wider.
pub fn groups(width: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let (q, r) = (width / n, width % n);
    let mut start = 0;
    (0..n)
        .map(|b| {
            let len = q + usize::from(b < r);
            let g = start..start + len;
            start += len;
            g
        })
        .collect()
}

/// `Σ_b (N ⊙ Z_b) H[:, g_b] W[g_b, :]`.
pub fn block_layer(norm: &Dense, masks: &[Dense], h: &Dense, w: &Dense) -> Dense {
    let g = groups(h[0].len(), masks.len());
    let mut out = zeros(h.len(), w[0].len());
    for (z, r) in masks.iter().zip(g) {
        let part = matmul(&matmul(&hadamard(norm, z), &cols(h, r.clone())), &rows(w, r));
        out = add(&out, &part);
    }
    out
}

pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mask entries aligned with `edges`, read from a dense `n × n` mask.
pub fn aligned(edges: &EdgeSet, z: &Dense) -> Vec<f64> {
    (0..edges.len()).map(|e| z[edges.row(e)][edges.col(e)]).collect()
}

pub fn params_from(weights: &[Dense]) -> Vec<LayerParams> {
    weights.iter().map(|w| LayerParams { weight: to_tensor(w), bias: None, drop: DropParam::Fixed(1.0) }).collect()
}

/// Log-probabilities from the library forward pass.
pub fn run_forward(config: &GcnConfig, params: &[LayerParams], graph: &PreparedGraph, x: &Tensor, masks: &[LayerMasks]) -> Dense {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, false);
    let xv = tape.constant_ref(x);
    let out = forward(&mut tape, config, &vars, xv, graph, masks, false).unwrap();
    from_tensor(tape.value(out.log_probs))
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

/// Tanh-sinh quadrature over (0, 1). `f` receives `x` and `1 - x`, both
/// computed without cancellation.
pub fn tanh_sinh(f: impl Fn(f64, f64) -> f64) -> f64 {
    use std::f64::consts::PI;
    let h = 1.0 / 128.0;
    let mut sum = 0.0;
    let mut k = -(6.0 / h) as i64;
    while (k as f64) * h <= 6.0 {
        let t = k as f64 * h;
        let s = PI * t.sinh();
        let x = 1.0 / (1.0 + (-s).exp());
        let y = 1.0 / (1.0 + s.exp());
        let w = x * y * PI * t.cosh();
        if w > 0.0 && x > 0.0 && y > 0.0 {
            let v = f(x, y);
            if v.is_finite() {
                sum += w * v;
            }
        }
        k += 1;
    }
    sum * h
}
