//! GCN layer stack with pluggable mask regularizers.
//!
//! Layer `l` computes `σ(Σ_b (𝔑(A) ⊙ Z_b) · H[:, block_b] · W[block_b, :])`.
//! Feature blocks are contiguous and near-equal. Each block either multiplies
//! first and aggregates second or the other way round, whichever is cheaper
//! for the layer's dimensions.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::PreparedGraph;
use crate::masks::{
    sample_dropout_mask, sample_gdc_masks_with, sample_node_mask, sample_concrete_mask, sample_randomwalk_mask,
    Concrete, EdgeMask, EdgeSampling, KeepSource, MaskKind, MaskSpec,
};
use crate::math::clamp_unit;
use crate::tape::{EdgeWeights, Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{kuma_sample, BetaPrior, KlVariant, KumaraswamyParams};

/// How drop-parameter gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Fixed keep probabilities only.
    #[default]
    None,
    Concrete,
    Arm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnConfig {
    /// `f_0, …, f_L`.
    pub layer_dims: Vec<usize>,
    /// Regularizers of each layer: at most one acting on features
    /// (DropOut, node sampling) and one acting on edges.
    pub regularizers: Vec<Vec<MaskSpec>>,
    pub estimator: Estimator,
    pub concrete: Concrete,
    pub beta_prior_c: f64,
    pub kuma_init_b: f64,
    pub kl_variant: KlVariant,
    /// Replace the flat L2 penalty by `|ℰ|·keep/2·‖M‖²` per layer.
    pub kl_weight_scaling: bool,
    pub use_bias: bool,
    /// Normalize the masked raw adjacency instead of masking `𝔑(A)`.
    pub renormalize_masked: bool,
}

impl GcnConfig {
    /// Unregularized GCN.
    pub fn plain(layer_dims: Vec<usize>) -> Self {
        let layers = layer_dims.len().saturating_sub(1);
        Self {
            layer_dims,
            regularizers: vec![Vec::new(); layers],
            estimator: Estimator::None,
            concrete: Concrete { temperature: 0.67, standard: false },
            beta_prior_c: 2.0,
            kuma_init_b: 3.0,
            kl_variant: KlVariant::Printed,
            kl_weight_scaling: false,
            use_bias: false,
            renormalize_masked: false,
        }
    }

    /// Same regularizer on every layer.
    pub fn uniform(layer_dims: Vec<usize>, spec: MaskSpec, estimator: Estimator) -> Self {
        let mut c = Self::plain(layer_dims);
        for r in &mut c.regularizers {
            r.push(spec);
        }
        c.estimator = estimator;
        c
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn prior(&self) -> Result<BetaPrior> {
        BetaPrior::new(self.beta_prior_c, self.n_layers())
    }

    pub fn feature_spec(&self, layer: usize) -> Option<&MaskSpec> {
        self.regularizers[layer].iter().find(|s| !s.kind.acts_on_edges())
    }

    pub fn edge_spec(&self, layer: usize) -> Option<&MaskSpec> {
        self.regularizers[layer].iter().find(|s| s.kind.acts_on_edges())
    }

    pub fn is_learned(&self, layer: usize) -> bool {
        self.edge_spec(layer).is_some_and(|s| s.keep == KeepSource::Learned)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(contract!("layer_dims needs at least two entries"));
        }
        if self.layer_dims.contains(&0) {
            return Err(contract!("layer widths must be positive"));
        }
        if self.regularizers.len() != self.n_layers() {
            return Err(contract!(
                "{} regularizer lists for {} layers",
                self.regularizers.len(),
                self.n_layers()
            ));
        }
        if !(self.beta_prior_c > 0.0) || !(self.kuma_init_b > 0.0) {
            return Err(contract!("beta_prior_c and kuma_init_b must be positive"));
        }
        Concrete::new(self.concrete.temperature, self.concrete.standard)?;
        let mut any_learned = false;
        for (l, specs) in self.regularizers.iter().enumerate() {
            let f_in = self.layer_dims[l];
            let n_feat = specs.iter().filter(|s| !s.kind.acts_on_edges()).count();
            let n_edge = specs.len() - n_feat;
            if n_feat > 1 || n_edge > 1 {
                return Err(contract!("layer {l}: at most one feature mask and one edge mask"));
            }
            for s in specs {
                s.validate(f_in)?;
                if self.renormalize_masked && s.kind.acts_on_edges() && !s.symmetric {
                    return Err(contract!("layer {l}: renormalizing after masking needs symmetric masks"));
                }
                if s.kind == MaskKind::RandomWalk && self.estimator == Estimator::Arm {
                    return Err(contract!("random-walk masks are not supported with the ARM estimator"));
                }
            }
            any_learned |= self.is_learned(l);
        }
        if any_learned && self.estimator == Estimator::None {
            return Err(contract!("learned keep probabilities need an estimator"));
        }
        if any_learned && self.renormalize_masked && self.estimator == Estimator::Concrete {
            return Err(contract!("renormalizing after masking needs binary masks"));
        }
        Ok(())
    }
}

/// Keep probability of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropParam {
    Fixed(f64),
    Learned(KumaraswamyParams),
}

impl DropParam {
    /// `E[π]`.
    pub fn expected_keep(&self) -> f64 {
        match self {
            DropParam::Fixed(p) => *p,
            DropParam::Learned(k) => k.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub drop: DropParam,
}

/// Glorot-uniform bound `√(6 / (f_in + f_out))`.
pub fn glorot_bound(f_in: usize, f_out: usize) -> f64 {
    libm::sqrt(6.0 / (f_in + f_out) as f64)
}

pub fn init_params<R: Rng + ?Sized>(config: &GcnConfig, rng: &mut R) -> Result<Vec<LayerParams>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.n_layers());
    for l in 0..config.n_layers() {
        let (f_in, f_out) = (config.layer_dims[l], config.layer_dims[l + 1]);
        let bound = glorot_bound(f_in, f_out);
        let data = (0..f_in * f_out).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound).collect();
        let weight = Tensor::from_vec(f_in, f_out, data)?;
        let bias = config.use_bias.then(|| Tensor::zeros(1, f_out));
        let drop = if config.is_learned(l) {
            DropParam::Learned(KumaraswamyParams::new(1.0, config.kuma_init_b)?)
        } else {
            DropParam::Fixed(layer_fixed_keep(config, l))
        };
        out.push(LayerParams { weight, bias, drop });
    }
    Ok(out)
}

fn layer_fixed_keep(config: &GcnConfig, l: usize) -> f64 {
    let spec = config.edge_spec(l).or_else(|| config.feature_spec(l));
    match spec.map(|s| s.keep) {
        Some(KeepSource::Fixed(p)) => p,
        _ => 1.0,
    }
}

/// Contiguous near-equal partition of `0..width`; the first `width % n`
/// blocks are one wider.
pub fn block_ranges(width: usize, n_blocks: usize) -> Result<Vec<Range<usize>>> {
    if n_blocks == 0 || n_blocks > width {
        return Err(contract!("cannot split {width} features into {n_blocks} blocks"));
    }
    let (base, rem) = (width / n_blocks, width % n_blocks);
    let mut start = 0;
    Ok((0..n_blocks)
        .map(|b| {
            let len = base + usize::from(b < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
    /// `(log a, log b)` for learned layers.
    pub drop: Vec<Option<(Var, Var)>>,
}

/// Records `params` on `tape`. With `trainable = false` the values are
/// borrowed and no gradients are tracked.
pub fn record_params<'a>(tape: &mut Tape<'a>, params: &'a [LayerParams], trainable: bool) -> ParamVars {
    let mut pv = ParamVars { weights: Vec::new(), biases: Vec::new(), drop: Vec::new() };
    for p in params {
        let leaf = |tape: &mut Tape<'a>, t: &'a Tensor| if trainable { tape.param(t.clone()) } else { tape.constant_ref(t) };
        pv.weights.push(leaf(tape, &p.weight));
        pv.biases.push(p.bias.as_ref().map(|b| leaf(tape, b)));
        pv.drop.push(match p.drop {
            DropParam::Learned(k) => {
                let mk = |tape: &mut Tape<'a>, v: f64| {
                    if trainable {
                        tape.param(Tensor::scalar(v))
                    } else {
                        tape.constant(Tensor::scalar(v))
                    }
                };
                Some((mk(tape, k.log_a), mk(tape, k.log_b)))
            }
            DropParam::Fixed(_) => None,
        });
    }
    pv
}

/// Mask applied to a layer input before aggregation.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMask {
    None,
    /// `n × f` elementwise mask.
    Elementwise(Tensor),
    /// One value per node, applied as `diag(z) · H`.
    Rows(Vec<f64>),
    /// Every entry multiplied by the same factor (expected-keep evaluation).
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeValues {
    Ones,
    Fixed(EdgeMask),
    /// One relaxed mask per block, recorded on the tape.
    Relaxed(Vec<Var>),
}

impl EdgeValues {
    pub fn n_blocks(&self) -> usize {
        match self {
            EdgeValues::Ones => 1,
            EdgeValues::Fixed(m) => m.n_blocks(),
            EdgeValues::Relaxed(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    pub feature: FeatureMask,
    pub edges: EdgeValues,
}

impl LayerMasks {
    pub fn identity() -> Self {
        Self { feature: FeatureMask::None, edges: EdgeValues::Ones }
    }
}

/// Uniform draws a learned layer needs for an ARM step. Each variable
/// covers one or two mask entries (two when mirrored).
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSlots {
    pub n_blocks: usize,
    pub n_edges: usize,
    pub uniforms: Vec<f64>,
    /// `(block, entry, mirror entry)` of each variable.
    pub entries: Vec<(usize, usize, Option<usize>)>,
}

impl ArmSlots {
    /// Keep mask `1 - z` from a drop-indicator vector over the variables.
    /// Entries without a variable (protected self-loops) stay at 1.
    pub fn keep_mask(&self, drop: &[f64]) -> Result<EdgeMask> {
        if drop.len() != self.entries.len() {
            return Err(contract!("{} indicators for {} ARM variables", drop.len(), self.entries.len()));
        }
        let mut blocks = vec![vec![1.0; self.n_edges]; self.n_blocks];
        for (&(b, e, m), &z) in self.entries.iter().zip(drop) {
            blocks[b][e] = 1.0 - z;
            if let Some(m) = m {
                blocks[b][m] = 1.0 - z;
            }
        }
        EdgeMask::from_blocks(blocks)
    }
}

/// How masks of learned layers are produced.
pub enum SampleMode<'t, 'a> {
    /// Binary masks at `π` drawn from the posterior.
    Binary,
    /// Concrete relaxation recorded on `tape`; `π` is a tape variable.
    Relaxed { tape: &'t mut Tape<'a>, vars: &'t ParamVars },
    /// Learned layers get [`ArmSlots`] and an all-ones placeholder mask.
    Arm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledMasks {
    pub layers: Vec<LayerMasks>,
    /// Keep probability used by each layer this draw.
    pub keep: Vec<f64>,
    /// Uniform behind each learned layer's `π` draw.
    pub u_pi: Vec<Option<f64>>,
    /// Relaxed `π` variables, when recorded.
    pub pi_vars: Vec<Option<Var>>,
    pub arm: Vec<Option<ArmSlots>>,
}

/// Draws one set of masks for every layer. Per layer, the feature mask is
/// drawn first, then the posterior uniform (learned layers), then edge masks.
pub fn sample_masks<R: Rng + ?Sized>(
    config: &GcnConfig,
    params: &[LayerParams],
    graph: &PreparedGraph,
    mut mode: SampleMode<'_, '_>,
    rng: &mut R,
) -> Result<SampledMasks> {
    let n = graph.n_nodes();
    let edges = graph.edges();
    let layers = config.n_layers();
    let mut out = SampledMasks {
        layers: Vec::with_capacity(layers),
        keep: Vec::with_capacity(layers),
        u_pi: vec![None; layers],
        pi_vars: vec![None; layers],
        arm: vec![None; layers],
    };
    let mut prev: Option<EdgeMask> = None;
    for l in 0..layers {
        let f_in = config.layer_dims[l];
        let feature = match config.feature_spec(l) {
            Some(s) => {
                let p = fixed_keep(s)?;
                match s.kind {
                    MaskKind::DropOut => FeatureMask::Elementwise(sample_dropout_mask(n, f_in, p, rng)?),
                    _ => FeatureMask::Rows(sample_node_mask(n, p, rng)?),
                }
            }
            None => FeatureMask::None,
        };
        let mut keep = config.feature_spec(l).map_or(1.0, |s| fixed_keep(s).unwrap_or(1.0));
        let edge_values = match config.edge_spec(l) {
            None => EdgeValues::Ones,
            Some(s) => {
                let opts = EdgeSampling { symmetric: s.symmetric, protect_self_loops: s.protect_self_loops };
                match (s.keep, &params[l].drop) {
                    (KeepSource::Fixed(p), _) => {
                        keep = p;
                        EdgeValues::Fixed(binary_edge_mask(s, p, opts, graph, prev.as_ref(), rng)?)
                    }
                    (KeepSource::Learned, DropParam::Learned(k)) => {
                        let u = clamp_unit(rng.gen::<f64>());
                        out.u_pi[l] = Some(u);
                        let pi = kuma_sample(k.a(), k.b(), u);
                        keep = pi;
                        match &mut mode {
                            SampleMode::Binary => {
                                EdgeValues::Fixed(binary_edge_mask(s, pi, opts, graph, prev.as_ref(), rng)?)
                            }
                            SampleMode::Relaxed { tape, vars } => {
                                let (la, lb) = vars.drop[l].ok_or_else(|| contract!("layer {l} has no recorded drop parameters"))?;
                                let pv = tape.kumaraswamy(la, lb, u)?;
                                out.pi_vars[l] = Some(pv);
                                let z = sample_concrete_mask(edges, s.n_blocks, pv, config.concrete, opts, rng, tape)?;
                                EdgeValues::Relaxed(z)
                            }
                            SampleMode::Arm => {
                                out.arm[l] = Some(arm_slots(s, opts, graph, rng));
                                EdgeValues::Ones
                            }
                        }
                    }
                    (KeepSource::Learned, DropParam::Fixed(_)) => {
                        return Err(contract!("layer {l} is learned but has fixed parameters"))
                    }
                }
            }
        };
        if let EdgeValues::Fixed(m) = &edge_values {
            if m.n_blocks() == 1 {
                prev = Some(m.clone());
            }
        }
        out.keep.push(keep);
        out.layers.push(LayerMasks { feature, edges: edge_values });
    }
    Ok(out)
}

fn fixed_keep(s: &MaskSpec) -> Result<f64> {
    match s.keep {
        KeepSource::Fixed(p) => Ok(p),
        KeepSource::Learned => Err(contract!("{:?} masks need a fixed keep probability", s.kind)),
    }
}

fn binary_edge_mask<R: Rng + ?Sized>(
    s: &MaskSpec,
    keep: f64,
    opts: EdgeSampling,
    graph: &PreparedGraph,
    prev: Option<&EdgeMask>,
    rng: &mut R,
) -> Result<EdgeMask> {
    let edges = graph.edges();
    match s.kind {
        MaskKind::RandomWalk => {
            let ones;
            let prev = match prev {
                Some(p) => p,
                None => {
                    ones = EdgeMask::ones(edges.len(), 1);
                    &ones
                }
            };
            sample_randomwalk_mask(edges, keep, prev, rng)
        }
        _ => sample_gdc_masks_with(edges, s.n_blocks, keep, opts, rng),
    }
}

fn arm_slots<R: Rng + ?Sized>(s: &MaskSpec, opts: EdgeSampling, graph: &PreparedGraph, rng: &mut R) -> ArmSlots {
    let edges = graph.edges();
    let mut slots = ArmSlots { n_blocks: s.n_blocks, n_edges: edges.len(), uniforms: Vec::new(), entries: Vec::new() };
    for b in 0..s.n_blocks {
        let u = opts.uniforms(edges, rng);
        for (e, x) in u.iter().enumerate() {
            let Some(x) = *x else { continue };
            if opts.symmetric {
                if edges.is_canonical(e) {
                    let m = edges.reverse(e);
                    slots.uniforms.push(x);
                    slots.entries.push((b, e, (m != e).then_some(m)));
                }
            } else {
                slots.uniforms.push(x);
                slots.entries.push((b, e, None));
            }
        }
    }
    slots
}

/// Deterministic masks that replace every Bernoulli variable by its mean.
pub fn expected_masks(config: &GcnConfig, params: &[LayerParams], graph: &PreparedGraph) -> Result<Vec<LayerMasks>> {
    let edges = graph.edges();
    let mut out = Vec::with_capacity(config.n_layers());
    for l in 0..config.n_layers() {
        let feature = match config.feature_spec(l) {
            Some(s) => FeatureMask::Scalar(fixed_keep(s)?),
            None => FeatureMask::None,
        };
        let edge_values = match config.edge_spec(l) {
            None => EdgeValues::Ones,
            Some(s) => {
                let p = match s.keep {
                    KeepSource::Fixed(p) => p,
                    KeepSource::Learned => params[l].drop.expected_keep(),
                };
                let block = (0..edges.len())
                    .map(|e| if s.protect_self_loops && edges.is_self_loop(e) { 1.0 } else { p })
                    .collect();
                EdgeValues::Fixed(EdgeMask::from_blocks(vec![block])?)
            }
        };
        out.push(LayerMasks { feature, edges: edge_values });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub log_probs: Var,
    /// Post-activation outputs of the hidden layers, when captured.
    pub hidden: Vec<Var>,
}

pub fn forward<'a>(
    tape: &mut Tape<'a>,
    config: &GcnConfig,
    vars: &ParamVars,
    x: Var,
    graph: &'a PreparedGraph,
    masks: &[LayerMasks],
    capture_hidden: bool,
) -> Result<ForwardOutput> {
    let layers = config.n_layers();
    if masks.len() != layers || vars.weights.len() != layers {
        return Err(contract!("expected {layers} layers of masks and weights"));
    }
    let mut h = x;
    let mut hidden = Vec::new();
    for l in 0..layers {
        let z = layer_forward(tape, config, graph, h, vars.weights[l], vars.biases[l], &masks[l])?;
        if l + 1 < layers {
            h = tape.relu(z)?;
            if capture_hidden {
                hidden.push(h);
            }
        } else {
            h = tape.log_softmax_rows(z)?;
        }
    }
    Ok(ForwardOutput { log_probs: h, hidden })
}

fn layer_forward<'a>(
    tape: &mut Tape<'a>,
    config: &GcnConfig,
    graph: &'a PreparedGraph,
    h: Var,
    w: Var,
    bias: Option<Var>,
    masks: &LayerMasks,
) -> Result<Var> {
    let n = graph.n_nodes();
    let (rows, f_in) = tape.value(h).shape();
    let f_out = tape.value(w).cols();
    if rows != n {
        return Err(contract!("layer input has {rows} rows for {n} nodes"));
    }
    let h = match &masks.feature {
        FeatureMask::None => h,
        FeatureMask::Scalar(p) if *p == 1.0 => h,
        FeatureMask::Scalar(p) => tape.scale(h, *p)?,
        FeatureMask::Elementwise(m) => {
            if m.shape() != (n, f_in) {
                return Err(contract!("feature mask shape {:?} does not match layer input {:?}", m.shape(), (n, f_in)));
            }
            tape.mul_const(h, m.data().to_vec())?
        }
        FeatureMask::Rows(z) => {
            if z.len() != n {
                return Err(contract!("node mask length {} for {n} nodes", z.len()));
            }
            let factor = z.iter().flat_map(|&v| core::iter::repeat_n(v, f_in)).collect();
            tape.mul_const(h, factor)?
        }
    };
    let weights: Vec<EdgeWeights<'a>> = match &masks.edges {
        EdgeValues::Ones => vec![EdgeWeights::Ones],
        EdgeValues::Fixed(m) => {
            if m.n_edges() != graph.edges().len() {
                return Err(contract!("edge mask covers {} entries, graph has {}", m.n_edges(), graph.edges().len()));
            }
            m.blocks().iter().map(|b| EdgeWeights::Fixed(Cow::Owned(b.clone()))).collect()
        }
        EdgeValues::Relaxed(v) => v.iter().map(|&z| EdgeWeights::Recorded(z)).collect(),
    };
    let ranges = block_ranges(f_in, weights.len())?;
    let matmul_first = weights.len() * f_out <= f_in;
    let mut acc: Option<Var> = None;
    for (ew, r) in weights.into_iter().zip(ranges) {
        let part = if matmul_first {
            let p = tape.matmul_slice(h, w, r)?;
            aggregate(tape, config, graph, ew, p, 0..f_out)?
        } else {
            let s = aggregate(tape, config, graph, ew, h, r.clone())?;
            tape.matmul_rows(s, w, r)?
        };
        acc = Some(match acc {
            None => part,
            Some(a) => tape.add(a, part)?,
        });
    }
    let mut out = acc.ok_or_else(|| contract!("layer has no blocks"))?;
    if let Some(b) = bias {
        out = tape.add_row_bias(out, b)?;
    }
    Ok(out)
}

fn aggregate<'a>(
    tape: &mut Tape<'a>,
    config: &GcnConfig,
    graph: &'a PreparedGraph,
    ew: EdgeWeights<'a>,
    h: Var,
    cols: Range<usize>,
) -> Result<Var> {
    if config.renormalize_masked {
        match ew {
            EdgeWeights::Ones => tape.masked_spmm(graph.norm(), EdgeWeights::Ones, h, cols),
            EdgeWeights::Fixed(z) => tape.spmm_owned(graph.renormalize_masked(&z)?, h, cols),
            EdgeWeights::Recorded(_) => Err(contract!("renormalizing after masking needs binary masks")),
        }
    } else {
        tape.masked_spmm(graph.norm(), ew, h, cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    /// `Σ_l KL(q(π_l) ‖ p(π_l))` before the warm-up factor.
    pub kl: Option<Var>,
    pub penalty: Option<Var>,
}

/// Masked NLL + weight penalty + `warmup · Σ KL`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<'a>(
    tape: &mut Tape<'a>,
    log_probs: Var,
    labels: &'a [usize],
    observed: &'a [usize],
    config: &GcnConfig,
    params: &[LayerParams],
    vars: &ParamVars,
    n_edges: usize,
    l2_factor: f64,
    warmup: f64,
) -> Result<LossTerms> {
    let nll = tape.masked_nll(log_probs, labels, observed)?;
    let mut total = nll;
    let mut penalty: Option<Var> = None;
    for (l, &w) in vars.weights.iter().enumerate() {
        let coef = if config.kl_weight_scaling {
            n_edges as f64 * params[l].drop.expected_keep() / 2.0
        } else {
            l2_factor
        };
        if coef == 0.0 {
            continue;
        }
        let sq = tape.frobenius_sq(w)?;
        let term = tape.scale(sq, coef)?;
        penalty = Some(match penalty {
            None => term,
            Some(p) => tape.add(p, term)?,
        });
    }
    if let Some(p) = penalty {
        total = tape.add(total, p)?;
    }
    let mut kl: Option<Var> = None;
    if vars.drop.iter().any(Option::is_some) {
        let prior = config.prior()?;
        for &(la, lb) in vars.drop.iter().flatten() {
            let k = tape.kl_kuma_beta(la, lb, prior, config.kl_variant)?;
            kl = Some(match kl {
                None => k,
                Some(acc) => tape.add(acc, k)?,
            });
        }
    }
    if let Some(k) = kl {
        if warmup != 0.0 {
            let wk = tape.scale(k, warmup)?;
            total = tape.add(total, wk)?;
        }
    }
    Ok(LossTerms { total, nll, kl, penalty })
}

/// Log-probabilities from a forward pass with expected-keep masks.
pub fn predict_expected(
    config: &GcnConfig,
    params: &[LayerParams],
    x: &Tensor,
    graph: &PreparedGraph,
) -> Result<Tensor> {
    let masks = expected_masks(config, params, graph)?;
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, params, false);
    let xv = tape.constant_ref(x);
    let out = forward(&mut tape, config, &vars, xv, graph, &masks, false)?;
    Ok(tape.value(out.log_probs).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub mean: Tensor,
    pub samples: Vec<Tensor>,
}

/// `samples` stochastic passes with fresh binary masks; learned layers draw
/// `π` from their posterior on every pass.
pub fn predict_mc<R: Rng + ?Sized>(
    config: &GcnConfig,
    params: &[LayerParams],
    x: &Tensor,
    graph: &PreparedGraph,
    samples: usize,
    rng: &mut R,
) -> Result<McPrediction> {
    if samples == 0 {
        return Err(contract!("at least one Monte Carlo sample is required"));
    }
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let masks = sample_masks(config, params, graph, SampleMode::Binary, rng)?;
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, params, false);
        let xv = tape.constant_ref(x);
        let f = forward(&mut tape, config, &vars, xv, graph, &masks.layers, false)?;
        out.push(tape.value(f.log_probs).map(libm::exp));
    }
    let (n, c) = out[0].shape();
    let mut mean = Tensor::zeros(n, c);
    for s in &out {
        for (m, v) in mean.data_mut().iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / samples as f64;
    for m in mean.data_mut() {
        *m *= inv;
    }
    Ok(McPrediction { mean, samples: out })
}

/// Expected keep probability of every layer (1 where nothing is masked).
pub fn expected_keep(params: &[LayerParams]) -> Vec<f64> {
    params.iter().map(|p| p.drop.expected_keep()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> PreparedGraph {
        let e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        PreparedGraph::from_pairs(&e, n, false).unwrap()
    }

    #[test]
    fn block_ranges_partition() {
        assert_eq!(block_ranges(7, 3).unwrap(), vec![0..3, 3..5, 5..7]);
        assert_eq!(block_ranges(4, 4).unwrap(), vec![0..1, 1..2, 2..3, 3..4]);
        assert!(block_ranges(3, 4).is_err());
        assert!(block_ranges(3, 0).is_err());
    }

    #[test]
    fn glorot_bound_plug_in() {
        assert!((glorot_bound(128, 7) - 0.210_818_510_677_891_96).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        let c = GcnConfig::plain(vec![5, 4, 3]);
        let a = init_params(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = init_params(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let bound = glorot_bound(5, 4);
        assert!(a[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn rows_sum_to_one() {
        let g = path_graph(5);
        let spec = MaskSpec::fixed(MaskKind::Gdc, 0.6);
        let mut c = GcnConfig::uniform(vec![3, 4, 2], spec, Estimator::None);
        c.regularizers[0][0].n_blocks = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(&c, &mut rng).unwrap();
        let x = Tensor::from_vec(5, 3, (0..15).map(|i| (i % 4) as f64 * 0.3).collect()).unwrap();
        let mc = predict_mc(&c, &params, &x, &g, 4, &mut rng).unwrap();
        for r in 0..5 {
            assert!((mc.mean.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_head_loss_is_log_classes() {
        let g = path_graph(4);
        let c = GcnConfig::plain(vec![2, 3, 5]);
        let mut params = init_params(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for p in &mut params {
            p.weight = Tensor::zeros(p.weight.rows(), p.weight.cols());
        }
        let x = Tensor::full(4, 2, 1.0);
        let labels = [0, 1, 2, 3];
        let observed = [0, 2];
        let mut tape = Tape::new();
        let vars = record_params(&mut tape, &params, true);
        let xv = tape.constant_ref(&x);
        let masks = vec![LayerMasks::identity(), LayerMasks::identity()];
        let f = forward(&mut tape, &c, &vars, xv, &g, &masks, false).unwrap();
        let loss = training_loss(&mut tape, f.log_probs, &labels, &observed, &c, &params, &vars, 10, 0.1, 1.0).unwrap();
        assert!((tape.value(loss.total).item() - libm::log(5.0)).abs() < 1e-12);
    }

    #[test]
    fn arm_slots_mirror_symmetric_entries() {
        let g = path_graph(4);
        let mut s = MaskSpec::learned(MaskKind::DropEdge, 1);
        s.symmetric = true;
        s.protect_self_loops = true;
        let opts = EdgeSampling { symmetric: true, protect_self_loops: true };
        let slots = arm_slots(&s, opts, &g, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(slots.entries.len(), 3);
        let m = slots.keep_mask(&[1.0, 0.0, 1.0]).unwrap();
        let es = g.edges();
        for e in 0..es.len() {
            assert_eq!(m.block(0)[e], m.block(0)[es.reverse(e)]);
            if es.is_self_loop(e) {
                assert_eq!(m.block(0)[e], 1.0);
            }
        }
    }
}
