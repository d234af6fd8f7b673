//! Reverse-mode gradients against central finite differences.

mod common;

use std::time::Instant;

use common::*;
use gdc_core::masks::{Concrete, MaskKind, MaskSpec};
use gdc_core::model::{
    forward, init_params, record_params, sample_masks, training_loss, DropParam, Estimator, GcnConfig, LayerParams,
    SampleMode,
};
use gdc_core::tape::EdgeWeights;
use gdc_core::variational::{BetaPrior, KlVariant, KumaraswamyParams};
use gdc_core::{PreparedGraph, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` around every entry of `x0`, compared with `grad`.
fn check_tensor(x0: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    worst
}

fn random_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    to_tensor(&random(rng, r, c))
}

fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> PreparedGraph {
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                pairs.push((u, v));
            }
        }
    }
    PreparedGraph::from_pairs(&pairs, n, false).unwrap()
}

#[test]
fn spmm_gradients_reach_features_and_relaxed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_graph(&mut rng, 7, 0.4);
    let h0 = random_tensor(&mut rng, 7, 3);
    let z0 = Tensor::from_vec(1, g.edges().len(), (0..g.edges().len()).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
    let c = random_tensor(&mut rng, 7, 3);
    let eval = |h: &Tensor, z: &Tensor| -> (f64, Tensor, Tensor) {
        let mut t = Tape::new();
        let hv = t.param(h.clone());
        let zv = t.param(z.clone());
        let y = t.masked_spmm(g.norm(), EdgeWeights::Recorded(zv), hv, 0..3).unwrap();
        let y = t.mul_const(y, c.data().to_vec()).unwrap();
        let loss = t.frobenius_sq(y).unwrap();
        let grads = t.backward(loss).unwrap();
        (t.value(loss).item(), grads.wrt(hv), grads.wrt(zv))
    };
    let (_, gh, gz) = eval(&h0, &z0);
    assert!(check_tensor(&h0, &gh, |h| eval(h, &z0).0) < REL_TOL);
    assert!(check_tensor(&z0, &gz, |z| eval(&h0, z).0) < REL_TOL);
}

#[test]
fn sliced_matmul_and_head_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x0 = random_tensor(&mut rng, 5, 6);
    let w0 = random_tensor(&mut rng, 6, 3);
    let b0 = random_tensor(&mut rng, 1, 3);
    let labels = [0usize, 2, 1, 1, 0];
    let observed = [0usize, 1, 3];
    let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> (f64, Tensor, Tensor, Tensor) {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.param(x.clone()), t.param(w.clone()), t.param(b.clone()));
        let p = t.matmul_slice(xv, wv, 2..5).unwrap();
        let q = t.matmul_slice(xv, wv, 0..2).unwrap();
        let s = t.add(p, q).unwrap();
        let s = t.add_row_bias(s, bv).unwrap();
        let s = t.sigmoid(s).unwrap();
        let lp = t.log_softmax_rows(s).unwrap();
        let loss = t.masked_nll(lp, &labels, &observed).unwrap();
        let g = t.backward(loss).unwrap();
        (t.value(loss).item(), g.wrt(xv), g.wrt(wv), g.wrt(bv))
    };
    let (_, gx, gw, gb) = eval(&x0, &w0, &b0);
    assert!(check_tensor(&x0, &gx, |x| eval(x, &w0, &b0).0) < REL_TOL);
    assert!(check_tensor(&w0, &gw, |w| eval(&x0, w, &b0).0) < REL_TOL);
    assert!(check_tensor(&b0, &gb, |b| eval(&x0, &w0, b).0) < REL_TOL);
}

#[test]
fn kumaraswamy_and_kl_node_gradients() {
    let prior = BetaPrior::new(2.0, 3).unwrap();
    for variant in [KlVariant::Printed, KlVariant::FullSeries] {
        for &(la, lb, u) in &[(0.0, 1.0986, 0.3), (-0.4, 0.2, 0.77), (0.9, -0.3, 0.05)] {
            let eval = |p: &Tensor| -> (f64, Tensor) {
                let mut t = Tape::new();
                let a = t.param(Tensor::scalar(p.data()[0]));
                let b = t.param(Tensor::scalar(p.data()[1]));
                let pi = t.kumaraswamy(a, b, u).unwrap();
                let lg = t.logit(pi).unwrap();
                let kl = t.kl_kuma_beta(a, b, prior, variant).unwrap();
                let sq = t.frobenius_sq(lg).unwrap();
                let loss = t.add(sq, kl).unwrap();
                let g = t.backward(loss).unwrap();
                (t.value(loss).item(), Tensor::from_vec(1, 2, vec![g.scalar(a), g.scalar(b)]).unwrap())
            };
            let p0 = Tensor::from_vec(1, 2, vec![la, lb]).unwrap();
            let (_, g) = eval(&p0);
            assert!(check_tensor(&p0, &g, |p| eval(p).0) < REL_TOL, "{variant:?} ({la}, {lb}, {u})");
        }
    }
}

/// Loss of the full model with relaxed masks drawn from a fixed stream,
/// plus its reverse-mode gradient per layer: (weight, bias, [d log a, d log b]).
#[allow(clippy::type_complexity)]
fn model_loss(
    config: &GcnConfig,
    params: &[LayerParams],
    graph: &PreparedGraph,
    x: &Tensor,
    labels: &[usize],
    observed: &[usize],
    mask_seed: u64,
) -> (f64, Vec<(Tensor, Option<Tensor>, Option<[f64; 2]>)>) {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let masks = sample_masks(config, params, graph, SampleMode::Relaxed { tape: &mut tape, vars: &vars }, &mut rng).unwrap();
    let xv = tape.constant_ref(x);
    let out = forward(&mut tape, config, &vars, xv, graph, &masks.layers, false).unwrap();
    let terms =
        training_loss(&mut tape, out.log_probs, labels, observed, config, params, &vars, graph.edges().len(), 5e-3, 0.7)
            .unwrap();
    let g = tape.backward(terms.total).unwrap();
    let per_layer = (0..params.len())
        .map(|l| {
            (
                g.wrt(vars.weights[l]),
                vars.biases[l].map(|b| g.wrt(b)),
                vars.drop[l].map(|(a, b)| [g.scalar(a), g.scalar(b)]),
            )
        })
        .collect();
    (tape.value(terms.total).item(), per_layer)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let (n, f, hidden, classes) = (12, 8, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let graph = random_graph(&mut rng, n, 0.3);
    let x = random_tensor(&mut rng, n, f);
    let labels: Vec<usize> = (0..n).map(|v| v % classes).collect();
    let observed: Vec<usize> = (0..n).step_by(2).collect();
    let variants: [(usize, bool, bool, bool, bool); 4] = [
        // (n_blocks, symmetric, protect_self_loops, concrete_standard, use_bias)
        (1, false, false, false, false),
        (2, true, false, false, true),
        (4, false, true, true, false),
        (3, true, true, false, true),
    ];
    for (nb, symmetric, protect, standard, bias) in variants {
        let spec = MaskSpec { symmetric, protect_self_loops: protect, ..MaskSpec::learned(MaskKind::Gdc, nb) };
        let mut config = GcnConfig::uniform(vec![f, hidden, classes], spec, Estimator::Concrete);
        config.concrete = Concrete::new(0.67, standard).unwrap();
        config.use_bias = bias;
        let mut params = init_params(&config, &mut rng).unwrap();
        for p in &mut params {
            p.drop = DropParam::Learned(KumaraswamyParams::new(rng.gen_range(0.8..2.0), rng.gen_range(0.8..3.0)).unwrap());
            if let Some(b) = &mut p.bias {
                *b = random_tensor(&mut rng, 1, b.cols());
            }
        }
        let loss = |p: &[LayerParams]| model_loss(&config, p, &graph, &x, &labels, &observed, 99).0;
        let (_, grads) = model_loss(&config, &params, &graph, &x, &labels, &observed, 99);
        let mut worst = 0.0f64;
        for l in 0..params.len() {
            let (gw, gb, gd) = &grads[l];
            worst = worst.max(check_tensor(&params[l].weight, gw, |w| {
                let mut p = params.clone();
                p[l].weight = w.clone();
                loss(&p)
            }));
            if let (Some(b0), Some(gb)) = (&params[l].bias, gb) {
                worst = worst.max(check_tensor(b0, gb, |b| {
                    let mut p = params.clone();
                    p[l].bias = Some(b.clone());
                    loss(&p)
                }));
            }
            let DropParam::Learned(k) = params[l].drop else { panic!("layer {l} is not learned") };
            let gd = gd.expect("learned layer has drop gradients");
            assert!(gd[0] != 0.0 && gd[1] != 0.0, "drop gradient vanished: {gd:?}");
            let d0 = Tensor::from_vec(1, 2, vec![k.log_a, k.log_b]).unwrap();
            worst = worst.max(check_tensor(&d0, &Tensor::from_vec(1, 2, gd.to_vec()).unwrap(), |d| {
                let mut p = params.clone();
                p[l].drop = DropParam::Learned(KumaraswamyParams { log_a: d.data()[0], log_b: d.data()[1] });
                loss(&p)
            }));
        }
        assert!(worst < REL_TOL, "blocks {nb}, symmetric {symmetric}: worst relative error {worst:e}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
