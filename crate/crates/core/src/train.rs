//! Full-batch training loop: mask sampling, loss, backward (plus ARM passes),
//! Adam, and early stopping on validation accuracy.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::estimators::{arm_gradient, arm_pseudo_masks, chain_to_kuma, ArmDraw};
use crate::graph::PreparedGraph;
use crate::data::Dataset;
use crate::math::{logit, PROB_EPS};
use crate::metrics::accuracy;
use crate::model::{
    expected_masks, forward, init_params, record_params, sample_masks, training_loss, DropParam, EdgeValues,
    Estimator, GcnConfig, LayerMasks, LayerParams, SampleMode, SampledMasks,
};
use crate::optim::{adam_step, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::variational::WarmupSchedule;

/// Consecutive non-finite epochs tolerated before giving up.
pub const DIVERGENCE_LIMIT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2_factor: f64,
    /// `None` applies the KL term at full weight from the first epoch.
    pub warmup: Option<WarmupSchedule>,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.005,
            l2_factor: 5e-3,
            warmup: Some(WarmupSchedule::new(20).expect("positive ramp")),
            patience: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(contract!("learning rate must be finite and non-negative"));
        }
        if self.patience == 0 {
            return Err(contract!("patience must be at least 1"));
        }
        if !(self.l2_factor >= 0.0) {
            return Err(contract!("l2_factor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub nll: f64,
    /// Unweighted `Σ_l KL`; 0 without learned layers.
    pub kl: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub expected_keep: Vec<f64>,
    pub wall_time: f64,
}

/// Seconds since some fixed origin. The core crate has no clock of its own.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Reports 0 for every reading.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// What an observer sees after every epoch.
pub struct EpochView<'a> {
    pub log: &'a EpochLog,
    pub params: &'a [LayerParams],
    /// Post-activation hidden outputs of the expected-keep evaluation pass,
    /// filled only when [`Observer::wants_hidden`] is true.
    pub hidden: &'a [Tensor],
}

pub trait Observer {
    fn wants_hidden(&self) -> bool {
        false
    }
    fn on_epoch(&mut self, view: &EpochView<'_>) -> Result<()>;
}

impl Observer for () {
    fn on_epoch(&mut self, _: &EpochView<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<LayerParams>,
    pub logs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

/// Accuracy of the expected-keep forward pass on validation and test nodes,
/// plus hidden outputs when requested.
pub fn evaluate(
    config: &GcnConfig,
    params: &[LayerParams],
    ds: &Dataset,
    graph: &PreparedGraph,
    capture_hidden: bool,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let split = ds.split()?;
    let masks = expected_masks(config, params, graph)?;
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, false);
    let x = tape.constant_ref(&ds.features);
    let out = forward(&mut tape, config, &vars, x, graph, &masks, capture_hidden)?;
    let pred = tape.value(out.log_probs).argmax_rows();
    let val = accuracy(&pred, &ds.labels, &split.val)?;
    let test = accuracy(&pred, &ds.labels, &split.test)?;
    let hidden = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
    Ok((val, test, hidden))
}

struct Optimizer {
    weights: Vec<AdamState>,
    biases: Vec<Option<AdamState>>,
    drop: Vec<Option<AdamState>>,
}

impl Optimizer {
    fn new(params: &[LayerParams]) -> Self {
        Self {
            weights: params.iter().map(|p| AdamState::new(p.weight.len())).collect(),
            biases: params.iter().map(|p| p.bias.as_ref().map(|b| AdamState::new(b.len()))).collect(),
            drop: params
                .iter()
                .map(|p| matches!(p.drop, DropParam::Learned(_)).then(|| AdamState::new(2)))
                .collect(),
        }
    }
}

/// Gradients of one step in parameter layout.
struct StepGrads {
    weights: Vec<Tensor>,
    biases: Vec<Option<Tensor>>,
    /// `(∂/∂log a, ∂/∂log b)`.
    drop: Vec<Option<[f64; 2]>>,
}

struct StepResult {
    grads: StepGrads,
    total: f64,
    nll: f64,
    kl: f64,
}

fn apply(params: &mut [LayerParams], grads: &StepGrads, opt: &mut Optimizer, lr: f64) -> Result<()> {
    // Check everything first so a rejected step leaves no partial update.
    let finite = grads.weights.iter().all(Tensor::is_finite)
        && grads.biases.iter().flatten().all(Tensor::is_finite)
        && grads.drop.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite("gradient"));
    }
    for (l, p) in params.iter_mut().enumerate() {
        adam_step(p.weight.data_mut(), grads.weights[l].data(), &mut opt.weights[l], lr)?;
        if let (Some(b), Some(g), Some(s)) = (p.bias.as_mut(), grads.biases[l].as_ref(), opt.biases[l].as_mut()) {
            adam_step(b.data_mut(), g.data(), s, lr)?;
        }
        if let (DropParam::Learned(k), Some(g), Some(s)) = (&mut p.drop, grads.drop[l], opt.drop[l].as_mut()) {
            let mut v = [k.log_a, k.log_b];
            adam_step(&mut v, &g, s, lr)?;
            k.log_a = v[0];
            k.log_b = v[1];
        }
    }
    Ok(())
}

/// Taped pass with the given masks: loss value and gradients of every
/// parameter reachable from it.
#[allow(clippy::too_many_arguments)]
fn taped_step(
    config: &GcnConfig,
    params: &[LayerParams],
    ds: &Dataset,
    graph: &PreparedGraph,
    train_idx: &[usize],
    tc: &TrainConfig,
    warmup: f64,
    masks: Option<&[LayerMasks]>,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, true);
    let sampled;
    let masks = match masks {
        Some(m) => m,
        None => {
            let mode = if config.estimator == Estimator::Concrete {
                SampleMode::Relaxed { tape: &mut tape, vars: &vars }
            } else {
                SampleMode::Binary
            };
            sampled = sample_masks(config, params, graph, mode, rng)?;
            &sampled.layers[..]
        }
    };
    let x = tape.constant_ref(&ds.features);
    let out = forward(&mut tape, config, &vars, x, graph, masks, false)?;
    let n_edges = graph.edges().len();
    let loss = training_loss(
        &mut tape,
        out.log_probs,
        &ds.labels,
        train_idx,
        config,
        params,
        &vars,
        n_edges,
        tc.l2_factor,
        warmup,
    )?;
    let g = tape.backward(loss.total)?;
    let grads = StepGrads {
        weights: vars.weights.iter().map(|&w| g.wrt(w)).collect(),
        biases: vars.biases.iter().map(|b| b.map(|b| g.wrt(b))).collect(),
        drop: vars.drop.iter().map(|d| d.map(|(la, lb)| [g.scalar(la), g.scalar(lb)])).collect(),
    };
    Ok(StepResult {
        grads,
        total: tape.value(loss.total).item(),
        nll: tape.value(loss.nll).item(),
        kl: loss.kl.map_or(0.0, |k| tape.value(k).item()),
    })
}

/// Masked NLL of an untaped forward pass.
fn data_loss(
    config: &GcnConfig,
    params: &[LayerParams],
    ds: &Dataset,
    graph: &PreparedGraph,
    train_idx: &[usize],
    masks: &[LayerMasks],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, false);
    let x = tape.constant_ref(&ds.features);
    let out = forward(&mut tape, config, &vars, x, graph, masks, false)?;
    let nll = tape.masked_nll(out.log_probs, &ds.labels, train_idx)?;
    Ok(tape.value(nll).item())
}

/// ARM step: weights (and the KL) through a taped pass at the keep mask
/// `1 - Z₂`, which is a Bernoulli(π) draw; drop parameters additionally
/// through the two-pass estimator on the data term.
#[allow(clippy::too_many_arguments)]
fn arm_step(
    config: &GcnConfig,
    params: &[LayerParams],
    ds: &Dataset,
    graph: &PreparedGraph,
    train_idx: &[usize],
    tc: &TrainConfig,
    warmup: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let SampledMasks { layers: base, keep, u_pi, arm, .. } = sample_masks(config, params, graph, SampleMode::Arm, rng)?;
    let learned: Vec<usize> = (0..arm.len()).filter(|&l| arm[l].is_some()).collect();
    let draw = ArmDraw {
        uniforms: learned.iter().map(|&l| arm[l].as_ref().map(|s| s.uniforms.clone()).unwrap_or_default()).collect(),
        alpha: learned.iter().map(|&l| logit(1.0 - keep[l].clamp(PROB_EPS, 1.0 - PROB_EPS))).collect(),
    };
    let with_drop_masks = |drop: &[Vec<f64>]| -> Result<Vec<LayerMasks>> {
        let mut masks = base.clone();
        for (i, &l) in learned.iter().enumerate() {
            let slots = arm[l].as_ref().ok_or_else(|| contract!("missing ARM slots"))?;
            masks[l].edges = EdgeValues::Fixed(slots.keep_mask(&drop[i])?);
        }
        Ok(masks)
    };
    let second: Vec<Vec<f64>> =
        draw.uniforms.iter().zip(&draw.alpha).map(|(u, &a)| arm_pseudo_masks(u, a).1).collect();
    let masks = with_drop_masks(&second)?;
    let mut step = taped_step(config, params, ds, graph, train_idx, tc, warmup, Some(&masks), rng)?;
    if learned.is_empty() {
        return Ok(step);
    }
    let est = arm_gradient(|drop| data_loss(config, params, ds, graph, train_idx, &with_drop_masks(drop)?), &draw)?;
    for (i, &l) in learned.iter().enumerate() {
        let DropParam::Learned(k) = params[l].drop else { continue };
        let u = u_pi[l].ok_or_else(|| contract!("learned layer {l} has no posterior draw"))?;
        let kg = chain_to_kuma(est.grad_alpha[i], k.a(), k.b(), u);
        let g = step.grads.drop[l].get_or_insert([0.0, 0.0]);
        g[0] += kg.grad_a * k.a();
        g[1] += kg.grad_b * k.b();
    }
    Ok(step)
}

/// Trains one model. The RNG stream is seeded from `tc.seed`; parameters are
/// initialized first, then masks are drawn epoch by epoch.
pub fn train_observed(
    ds: &Dataset,
    graph: &PreparedGraph,
    config: &GcnConfig,
    tc: &TrainConfig,
    clock: &dyn Clock,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    if ds.n_features() != config.layer_dims[0] {
        return Err(contract!("dataset has {} features, model expects {}", ds.n_features(), config.layer_dims[0]));
    }
    if ds.class_count > *config.layer_dims.last().unwrap_or(&0) {
        return Err(contract!("dataset has {} classes, head has {}", ds.class_count, config.layer_dims.last().unwrap_or(&0)));
    }
    let split = ds.split()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = init_params(config, &mut rng)?;
    let mut opt = Optimizer::new(&params);
    let start = clock.seconds();

    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, f64, Vec<LayerParams>)> = None;
    let mut bad_streak = 0usize;
    let want_hidden = observer.wants_hidden();
    for epoch in 0..tc.epochs {
        let warmup = tc.warmup.map_or(1.0, |w| w.factor(epoch));
        let step = match config.estimator {
            Estimator::Arm => arm_step(config, &params, ds, graph, &split.train, tc, warmup, &mut rng),
            _ => taped_step(config, &params, ds, graph, &split.train, tc, warmup, None, &mut rng),
        };
        let (total, nll, kl) = match step.and_then(|s| apply(&mut params, &s.grads, &mut opt, tc.lr).map(|_| s)) {
            Ok(s) => (s.total, s.nll, s.kl),
            Err(Error::NonFinite(_)) => (f64::NAN, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let (val_acc, test_acc, hidden) = match evaluate(config, &params, ds, graph, want_hidden) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => (f64::NAN, f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if total.is_finite() && val_acc.is_finite() {
            bad_streak = 0;
        } else {
            bad_streak += 1;
            if bad_streak >= DIVERGENCE_LIMIT {
                return Err(Error::Diverged { epoch });
            }
        }
        let log = EpochLog {
            epoch,
            train_loss: total,
            nll,
            kl,
            val_acc,
            test_acc,
            expected_keep: params.iter().map(|p| p.drop.expected_keep()).collect(),
            wall_time: clock.seconds() - start,
        };
        observer.on_epoch(&EpochView { log: &log, params: &params, hidden: &hidden })?;
        logs.push(log);
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, test_acc, params.clone()));
        }
        if let Some(b) = &best {
            if epoch - b.0 >= tc.patience {
                break;
            }
        }
    }
    match best {
        Some((epoch, val, test, p)) => {
            Ok(TrainOutcome { params: p, logs, best_epoch: Some(epoch), best_val_acc: val, test_acc: test })
        }
        None => {
            let (val, test, _) = evaluate(config, &params, ds, graph, false)?;
            Ok(TrainOutcome { params, logs, best_epoch: None, best_val_acc: val, test_acc: test })
        }
    }
}

pub fn train(ds: &Dataset, graph: &PreparedGraph, config: &GcnConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(ds, graph, config, tc, &NoClock, &mut ())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub runs: Vec<SeedResult>,
    pub mean_test_acc: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one run.
    pub std_test_acc: f64,
}

/// `(mean, sample std)`.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(contract!("mean of an empty list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, libm::sqrt(var)))
}

pub fn summarize(runs: Vec<SeedResult>) -> Result<SeedSummary> {
    let acc: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
    let (mean_test_acc, std_test_acc) = mean_std(&acc)?;
    Ok(SeedSummary { runs, mean_test_acc, std_test_acc })
}

pub fn seed_result(seed: u64, outcome: &TrainOutcome) -> SeedResult {
    SeedResult {
        seed,
        best_val_acc: outcome.best_val_acc,
        test_acc: outcome.test_acc,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.logs.len(),
    }
}

/// Sequential multi-seed run; each seed replaces `tc.seed`.
pub fn run_seeds(
    ds: &Dataset,
    graph: &PreparedGraph,
    config: &GcnConfig,
    tc: &TrainConfig,
    seeds: &[u64],
) -> Result<SeedSummary> {
    if seeds.is_empty() {
        return Err(contract!("at least one seed is required"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let t = TrainConfig { seed, ..tc.clone() };
        let out = train(ds, graph, config, &t)?;
        runs.push(seed_result(seed, &out));
    }
    summarize(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::data::{make_split, two_clusters};

    fn cluster_data() -> (Dataset, PreparedGraph) {
        let ds = make_split(two_clusters(10).unwrap(), 2, 6, 10).unwrap();
        let g = ds.graph(false).unwrap();
        (ds, g)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (ds, g) = cluster_data();
        let c = GcnConfig::plain(vec![2, 8, 2]);
        let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&ds, &g, &c, &tc).unwrap();
        let init = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.logs.is_empty());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (ds, g) = cluster_data();
        let c = GcnConfig::plain(vec![2, 8, 2]);
        let tc = TrainConfig { epochs: 5, lr: 0.0, ..TrainConfig::default() };
        let out = train(&ds, &g, &c, &tc).unwrap();
        let init = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn std_uses_sample_denominator() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]).unwrap().1, 0.0);
    }
}
