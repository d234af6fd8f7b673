//! Random masks for DropOut, DropEdge, node sampling, Graph DropConnect and
//! random-walk sampling.
//!
//! Every probability here is a KEEP probability: an entry is 1 with
//! probability `keep`. Edge masks are aligned with the stored nonzeros of the
//! normalized adjacency (graph edges in both directions plus self-loops) and
//! are multiplied into it; nothing is renormalized and nothing is rescaled by
//! `1 / keep`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::EdgeSet;
use crate::math::{clamp_unit, logit};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which regularizer a layer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Bernoulli mask on the layer input `H`, elementwise.
    DropOut,
    /// One mask over adjacency entries shared by every feature.
    DropEdge,
    /// Bernoulli mask on whole rows of `H`.
    NodeSampling,
    /// Independent adjacency masks per contiguous block of input features.
    Gdc,
    /// DropEdge whose entries are forced off for nodes the previous layer
    /// cut off entirely.
    RandomWalk,
}

impl MaskKind {
    pub fn acts_on_edges(self) -> bool {
        matches!(self, MaskKind::DropEdge | MaskKind::Gdc | MaskKind::RandomWalk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeepSource {
    Fixed(f64),
    /// Drawn from the layer's Kumaraswamy posterior.
    Learned,
}

/// Per-layer regularizer description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub keep: KeepSource,
    pub n_blocks: usize,
    pub symmetric: bool,
    pub protect_self_loops: bool,
}

impl MaskSpec {
    pub fn fixed(kind: MaskKind, keep: f64) -> Self {
        Self { kind, keep: KeepSource::Fixed(keep), n_blocks: 1, symmetric: false, protect_self_loops: false }
    }

    pub fn learned(kind: MaskKind, n_blocks: usize) -> Self {
        Self { kind, keep: KeepSource::Learned, n_blocks, symmetric: false, protect_self_loops: false }
    }

    pub fn validate(&self, input_width: usize) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > input_width.max(1) {
            return Err(contract!("n_blocks = {} must lie in [1, {input_width}]", self.n_blocks));
        }
        if self.n_blocks > 1 && self.kind != MaskKind::Gdc {
            return Err(contract!("{:?} does not support blocks", self.kind));
        }
        match self.keep {
            KeepSource::Fixed(p) => check_keep(p),
            KeepSource::Learned if !matches!(self.kind, MaskKind::DropEdge | MaskKind::Gdc) => {
                Err(contract!("learned keep probabilities are only supported for edge masks"))
            }
            KeepSource::Learned => Ok(()),
        }
    }
}

/// Relaxed Bernoulli settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concrete {
    pub temperature: f64,
    /// Divide both the logit and the logistic noise by the temperature
    /// instead of the logit only.
    pub standard: bool,
}

impl Concrete {
    pub fn new(temperature: f64, standard: bool) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(contract!("temperature must be positive"));
        }
        Ok(Self { temperature, standard })
    }

    /// Relaxed keep value for keep probability `pi` and uniform draw `u`.
    pub fn relax(&self, pi: f64, u: f64) -> f64 {
        let (ls, ns) = self.scales();
        crate::math::sigmoid(ls * logit(pi) + ns * logit(clamp_unit(u)))
    }

    fn scales(&self) -> (f64, f64) {
        let inv_t = 1.0 / self.temperature;
        if self.standard {
            (inv_t, inv_t)
        } else {
            (inv_t, 1.0)
        }
    }
}

/// Keep values per block, each aligned with an [`EdgeSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    blocks: Vec<Vec<f64>>,
}

impl EdgeMask {
    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self> {
        let len = blocks.first().map(Vec::len).ok_or_else(|| contract!("edge mask needs a block"))?;
        if blocks.iter().any(|b| b.len() != len) {
            return Err(contract!("edge mask blocks differ in length"));
        }
        Ok(Self { blocks })
    }

    pub fn ones(n_edges: usize, n_blocks: usize) -> Self {
        Self { blocks: vec![vec![1.0; n_edges]; n_blocks] }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_edges(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.blocks[b]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Vec<f64>> {
        self.blocks
    }
}

fn check_keep(keep: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&keep) {
        return Err(contract!("keep probability {keep} outside [0, 1]"));
    }
    Ok(())
}

#[inline]
fn bernoulli<R: Rng + ?Sized>(keep: f64, rng: &mut R) -> f64 {
    if rng.gen::<f64>() < keep {
        1.0
    } else {
        0.0
    }
}

/// Binary `n × f` DropOut mask.
pub fn sample_dropout_mask<R: Rng + ?Sized>(n: usize, f: usize, keep: f64, rng: &mut R) -> Result<Tensor> {
    check_keep(keep)?;
    let data = (0..n * f).map(|_| bernoulli(keep, rng)).collect();
    Tensor::from_vec(n, f, data)
}

/// Binary per-node mask, applied as `diag(z) · H`.
pub fn sample_node_mask<R: Rng + ?Sized>(n: usize, keep: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_keep(keep)?;
    Ok((0..n).map(|_| bernoulli(keep, rng)).collect())
}

/// Options shared by all adjacency samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeSampling {
    /// One draw per undirected edge, mirrored to both directions.
    pub symmetric: bool,
    /// Self-loop entries are always kept.
    pub protect_self_loops: bool,
}

impl EdgeSampling {
    /// One block of Bernoulli(keep) values over `edges`. Draws are consumed in
    /// storage order; mirrored and protected entries consume none.
    pub fn sample_block<R: Rng + ?Sized>(&self, edges: &EdgeSet, keep: f64, rng: &mut R) -> Result<Vec<f64>> {
        check_keep(keep)?;
        let mut mask = vec![0.0; edges.len()];
        for e in 0..edges.len() {
            if self.protect_self_loops && edges.is_self_loop(e) {
                mask[e] = 1.0;
                continue;
            }
            if self.symmetric {
                if edges.is_canonical(e) {
                    let z = bernoulli(keep, rng);
                    mask[e] = z;
                    mask[edges.reverse(e)] = z;
                }
            } else {
                mask[e] = bernoulli(keep, rng);
            }
        }
        Ok(mask)
    }

    /// Uniform variates per entry with the same sharing rules as
    /// [`EdgeSampling::sample_block`]. Protected entries get `None`.
    pub fn uniforms<R: Rng + ?Sized>(&self, edges: &EdgeSet, rng: &mut R) -> Vec<Option<f64>> {
        let mut u = vec![None; edges.len()];
        for e in 0..edges.len() {
            if self.protect_self_loops && edges.is_self_loop(e) {
                continue;
            }
            if self.symmetric {
                if edges.is_canonical(e) {
                    let x = clamp_unit(rng.gen::<f64>());
                    u[e] = Some(x);
                    u[edges.reverse(e)] = Some(x);
                }
            } else {
                u[e] = Some(clamp_unit(rng.gen::<f64>()));
            }
        }
        u
    }
}

/// Single-block DropEdge mask.
pub fn sample_dropedge_mask<R: Rng + ?Sized>(edges: &EdgeSet, keep: f64, symmetric: bool, rng: &mut R) -> Result<EdgeMask> {
    let opts = EdgeSampling { symmetric, protect_self_loops: false };
    EdgeMask::from_blocks(vec![opts.sample_block(edges, keep, rng)?])
}

/// `n_blocks` independent DropEdge-style masks. With one block this consumes
/// the RNG exactly like [`sample_dropedge_mask`].
pub fn sample_gdc_masks<R: Rng + ?Sized>(
    edges: &EdgeSet,
    n_blocks: usize,
    keep: f64,
    symmetric: bool,
    rng: &mut R,
) -> Result<EdgeMask> {
    sample_gdc_masks_with(edges, n_blocks, keep, EdgeSampling { symmetric, protect_self_loops: false }, rng)
}

pub fn sample_gdc_masks_with<R: Rng + ?Sized>(
    edges: &EdgeSet,
    n_blocks: usize,
    keep: f64,
    opts: EdgeSampling,
    rng: &mut R,
) -> Result<EdgeMask> {
    if n_blocks == 0 {
        return Err(contract!("n_blocks must be at least 1"));
    }
    let blocks = (0..n_blocks).map(|_| opts.sample_block(edges, keep, rng)).collect::<Result<Vec<_>>>()?;
    EdgeMask::from_blocks(blocks)
}

/// Relaxed masks recorded on a tape so gradients reach `pi`.
///
/// Each entry is `sigmoid(logit(π)/t + logit(u))` (or with both terms over
/// `t` when [`Concrete::standard`] is set).
pub fn sample_concrete_mask<R: Rng + ?Sized>(
    edges: &EdgeSet,
    n_blocks: usize,
    pi: Var,
    concrete: Concrete,
    opts: EdgeSampling,
    rng: &mut R,
    tape: &mut Tape<'_>,
) -> Result<Vec<Var>> {
    if n_blocks == 0 {
        return Err(contract!("n_blocks must be at least 1"));
    }
    let p = tape.value(pi).item();
    if !(p > 0.0 && p < 1.0) {
        return Err(contract!("concrete relaxation needs 0 < π < 1, got {p}"));
    }
    let (logit_scale, noise_scale) = concrete.scales();
    let lp = tape.logit(pi)?;
    let mut out = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let u = opts.uniforms(edges, rng);
        let offsets: Vec<f64> = u.iter().map(|x| x.map_or(0.0, |x| noise_scale * logit(x))).collect();
        let pre = tape.broadcast_affine(lp, logit_scale, &offsets)?;
        let mut z = tape.sigmoid(pre)?;
        let protected: Vec<usize> = u.iter().enumerate().filter(|(_, x)| x.is_none()).map(|(e, _)| e).collect();
        if !protected.is_empty() {
            z = tape.fill(z, protected, 1.0)?;
        }
        out.push(z);
    }
    Ok(out)
}

/// Random-walk mask: entries aggregated into node `v` are Bernoulli(keep)
/// only if `v` kept at least one incoming entry in `prev`, otherwise 0.
pub fn sample_randomwalk_mask<R: Rng + ?Sized>(
    edges: &EdgeSet,
    keep: f64,
    prev: &EdgeMask,
    rng: &mut R,
) -> Result<EdgeMask> {
    check_keep(keep)?;
    if prev.n_blocks() != 1 || prev.n_edges() != edges.len() {
        return Err(contract!("random-walk sampling needs a single-block mask on the same edge set"));
    }
    let prev = prev.block(0);
    let mut alive = vec![false; edges.n_nodes()];
    for e in 0..edges.len() {
        if prev[e] > 0.0 {
            alive[edges.row(e)] = true;
        }
    }
    let mask = (0..edges.len())
        .map(|e| {
            let z = bernoulli(keep, rng);
            if alive[edges.row(e)] {
                z
            } else {
                0.0
            }
        })
        .collect();
    EdgeMask::from_blocks(vec![mask])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, normalize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> EdgeSet {
        let e: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        EdgeSet::from_pattern(&normalize(&build_adjacency(&e, n, true).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn extreme_keep_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_dropout_mask(4, 3, 1.0, &mut rng).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(sample_dropout_mask(4, 3, 0.0, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(sample_node_mask(5, 1.0, &mut rng).unwrap().iter().all(|&v| v == 1.0));
        let es = ring(6);
        assert_eq!(sample_dropedge_mask(&es, 1.0, false, &mut rng).unwrap(), EdgeMask::ones(es.len(), 1));
        assert!(sample_dropout_mask(1, 1, 1.2, &mut rng).is_err());
        assert!(sample_node_mask(1, -0.1, &mut rng).is_err());
    }

    #[test]
    fn symmetric_masks_mirror() {
        let es = ring(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = sample_gdc_masks(&es, 3, 0.5, true, &mut rng).unwrap();
        for b in 0..3 {
            for e in 0..es.len() {
                assert_eq!(m.block(b)[e], m.block(b)[es.reverse(e)]);
            }
        }
    }

    #[test]
    fn one_block_gdc_is_dropedge() {
        let es = ring(8);
        for symmetric in [false, true] {
            let a = sample_dropedge_mask(&es, 0.6, symmetric, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = sample_gdc_masks(&es, 1, 0.6, symmetric, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn protected_self_loops_stay_on() {
        let es = ring(5);
        let opts = EdgeSampling { symmetric: false, protect_self_loops: true };
        let m = opts.sample_block(&es, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for e in 0..es.len() {
            assert_eq!(m[e], if es.is_self_loop(e) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn concrete_at_half_returns_uniform() {
        let c = Concrete::new(0.67, false).unwrap();
        for &u in &[0.1, 0.37, 0.5, 0.93] {
            assert!((c.relax(0.5, u) - u).abs() < 1e-14);
        }
    }

    #[test]
    fn concrete_rejects_boundary_pi() {
        let es = ring(4);
        let mut tape = Tape::new();
        let pi = tape.constant(Tensor::scalar(1.0));
        let c = Concrete::new(0.67, false).unwrap();
        let r = sample_concrete_mask(&es, 1, pi, c, EdgeSampling::default(), &mut ChaCha8Rng::seed_from_u64(0), &mut tape);
        assert!(r.is_err());
        assert!(Concrete::new(0.0, false).is_err());
    }

    #[test]
    fn concrete_tape_values_match_scalar_formula() {
        let es = ring(4);
        let c = Concrete::new(0.67, false).unwrap();
        let mut tape = Tape::new();
        let pi = tape.constant(Tensor::scalar(0.8));
        let zs = sample_concrete_mask(&es, 2, pi, c, EdgeSampling::default(), &mut ChaCha8Rng::seed_from_u64(5), &mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for z in zs {
            for &v in tape.value(z).data() {
                let u = clamp_unit(rng.gen::<f64>());
                assert!((v - c.relax(0.8, u)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn randomwalk_extremes() {
        let es = ring(6);
        let ones = EdgeMask::ones(es.len(), 1);
        let a = sample_randomwalk_mask(&es, 0.7, &ones, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = sample_dropedge_mask(&es, 0.7, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let zeros = EdgeMask::from_blocks(vec![vec![0.0; es.len()]]).unwrap();
        let z = sample_randomwalk_mask(&es, 0.7, &zeros, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(z.block(0).iter().all(|&v| v == 0.0));
        let two = EdgeMask::ones(es.len(), 2);
        assert!(sample_randomwalk_mask(&es, 0.7, &two, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MaskSpec::learned(MaskKind::Gdc, 2).validate(4).is_ok());
        assert!(MaskSpec::learned(MaskKind::Gdc, 5).validate(4).is_err());
        assert!(MaskSpec::learned(MaskKind::DropOut, 1).validate(4).is_err());
        let mut de = MaskSpec::fixed(MaskKind::DropEdge, 0.5);
        de.n_blocks = 2;
        assert!(de.validate(4).is_err());
    }
}
