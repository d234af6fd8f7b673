//! Run configuration. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use gdc_core::masks::{Concrete, KeepSource, MaskKind, MaskSpec};
use gdc_core::model::{Estimator, GcnConfig};
use gdc_core::train::TrainConfig;
use gdc_core::variational::{KlVariant, WarmupSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub uq: UqSection,
    pub diagnose: DiagnoseSection,
    pub output: OutputSection,
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two dense clusters with one-hot features.
    TwoClusters,
    /// Planted partition with noisy indicator features.
    PlantedPartition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub features: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::TwoClusters,
            classes: 2,
            per_class: 10,
            p_in: 0.3,
            p_out: 0.01,
            features: 16,
            feature_noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub content: Option<PathBuf>,
    pub cites: Option<PathBuf>,
    /// Binary dataset cache: written after text ingestion, read when no
    /// text files are configured.
    pub cache: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub normalize_features: bool,
    pub per_class_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            content: None,
            cites: None,
            cache: None,
            synthetic: None,
            normalize_features: true,
            per_class_train: 20,
            n_val: 500,
            n_test: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Dropout,
    Dropedge,
    NodeSampling,
    Gdc,
    RandomWalk,
    /// DropOut on features plus DropEdge on the adjacency.
    DropoutDropedge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    None,
    Concrete,
    Arm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Number of graph convolution layers.
    pub layers: usize,
    pub hidden: usize,
    pub regularizer: Regularizer,
    /// Keep probability of fixed-rate masks.
    pub keep_prob: f64,
    /// Keep probability of the feature mask in `dropout_dropedge`.
    pub feature_keep_prob: f64,
    pub n_blocks: usize,
    /// Block count of the first layer; `n_blocks` when unset.
    pub first_layer_blocks: Option<usize>,
    /// Settings for `sweep-blocks`.
    pub block_sweep: Vec<usize>,
    pub symmetric: bool,
    pub protect_self_loops: bool,
    /// Anything but `none` makes the edge keep probability learnable.
    pub estimator: EstimatorName,
    pub temperature: f64,
    pub concrete_standard: bool,
    pub beta_prior_c: f64,
    pub kuma_init_b: f64,
    pub kl_full_series: bool,
    pub kl_weight_scaling: bool,
    pub use_bias: bool,
    pub renorm_trick: bool,
    pub renormalize_masked: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 128,
            regularizer: Regularizer::Dropout,
            keep_prob: 0.5,
            feature_keep_prob: 0.5,
            n_blocks: 1,
            first_layer_blocks: None,
            block_sweep: vec![1, 2, 4],
            symmetric: false,
            protect_self_loops: false,
            estimator: EstimatorName::None,
            temperature: 0.67,
            concrete_standard: false,
            beta_prior_c: 2.0,
            kuma_init_b: 3.0,
            kl_full_series: false,
            kl_weight_scaling: false,
            use_bias: false,
            renorm_trick: false,
            renormalize_masked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub l2_factor: f64,
    /// Linear KL warm-up length in epochs; 0 disables warm-up.
    pub warmup_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 2000, lr: 0.005, l2_factor: 5e-3, warmup_epochs: 20, patience: 200, seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScaleName {
    ObservedMax,
    LogClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqSection {
    pub samples: usize,
    pub threshold_fracs: Vec<f64>,
    pub entropy_scale: EntropyScaleName,
}

impl Default for UqSection {
    fn default() -> Self {
        Self {
            samples: 20,
            threshold_fracs: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            entropy_scale: EntropyScaleName::ObservedMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Divide TV by `‖H‖²_F`.
    pub normalized: bool,
    /// Layer counts for the accuracy-versus-depth sweep.
    pub depths: Vec<usize>,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { normalized: true, depths: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    /// Parses `path`. Relative data paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.content, &mut cfg.data.cites, &mut cfg.data.cache].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        let sources = usize::from(d.content.is_some() || d.cites.is_some())
            + usize::from(d.synthetic.is_some())
            + usize::from(d.cache.is_some() && d.content.is_none());
        if sources == 0 {
            return Err(CliError::Config("data: set content and cites, cache, or synthetic".into()));
        }
        if d.content.is_some() != d.cites.is_some() {
            return Err(CliError::Config("data: content and cites must be given together".into()));
        }
        if d.synthetic.is_some() && (d.content.is_some() || d.cache.is_some()) {
            return Err(CliError::Config("data: synthetic excludes file inputs".into()));
        }
        let needs_exist = [&d.content, &d.cites].into_iter().flatten();
        for p in needs_exist {
            if !p.exists() {
                return Err(CliError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if d.content.is_none() {
            if let Some(c) = &d.cache {
                if !c.exists() {
                    return Err(CliError::Config(format!("dataset cache {} does not exist", c.display())));
                }
            }
        }
        let m = &self.model;
        if m.layers < 1 || m.hidden < 1 {
            return Err(CliError::Config("model: layers and hidden must be at least 1".into()));
        }
        if m.estimator != EstimatorName::None
            && !matches!(m.regularizer, Regularizer::Gdc | Regularizer::Dropedge | Regularizer::DropoutDropedge)
        {
            return Err(CliError::Config("model: an estimator needs an edge regularizer (gdc, dropedge)".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(CliError::Config("train: seeds must not be empty".into()));
        }
        if self.uq.samples == 0 {
            return Err(CliError::Config("uq: samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Core model configuration for a dataset with `n_features` inputs and
    /// `n_classes` outputs.
    pub fn model_config(&self, n_features: usize, n_classes: usize) -> Result<GcnConfig, CliError> {
        self.model_config_with(n_features, n_classes, self.model.layers, self.model.n_blocks)
    }

    pub fn model_config_with(
        &self,
        n_features: usize,
        n_classes: usize,
        layers: usize,
        n_blocks: usize,
    ) -> Result<GcnConfig, CliError> {
        let m = &self.model;
        let mut dims = vec![n_features];
        dims.extend(std::iter::repeat_n(m.hidden, layers.saturating_sub(1)));
        dims.push(n_classes);
        let learned = m.estimator != EstimatorName::None;
        let edge_keep = if learned { KeepSource::Learned } else { KeepSource::Fixed(m.keep_prob) };
        let edge = |kind: MaskKind, n_blocks: usize| MaskSpec {
            kind,
            keep: edge_keep,
            n_blocks,
            symmetric: m.symmetric,
            protect_self_loops: m.protect_self_loops,
        };
        let specs: Vec<MaskSpec> = match m.regularizer {
            Regularizer::None => Vec::new(),
            Regularizer::Dropout => vec![MaskSpec::fixed(MaskKind::DropOut, m.keep_prob)],
            Regularizer::NodeSampling => vec![MaskSpec::fixed(MaskKind::NodeSampling, m.keep_prob)],
            Regularizer::Dropedge => vec![edge(MaskKind::DropEdge, 1)],
            Regularizer::RandomWalk => vec![edge(MaskKind::RandomWalk, 1)],
            Regularizer::Gdc => vec![edge(MaskKind::Gdc, n_blocks)],
            Regularizer::DropoutDropedge => {
                vec![MaskSpec::fixed(MaskKind::DropOut, m.feature_keep_prob), edge(MaskKind::DropEdge, 1)]
            }
        };
        let mut regularizers = Vec::with_capacity(dims.len() - 1);
        for (l, &width) in dims[..dims.len() - 1].iter().enumerate() {
            // A layer narrower than the block count uses as many blocks as it has features.
            let first = m.first_layer_blocks.filter(|_| l == 0);
            let layer_specs = specs
                .iter()
                .map(|s| {
                    let nb = if s.kind == MaskKind::Gdc { first.unwrap_or(s.n_blocks) } else { s.n_blocks };
                    MaskSpec { n_blocks: nb.min(width), ..*s }
                })
                .collect();
            regularizers.push(layer_specs);
        }
        let cfg = GcnConfig {
            layer_dims: dims,
            regularizers,
            estimator: match m.estimator {
                EstimatorName::None => Estimator::None,
                EstimatorName::Concrete => Estimator::Concrete,
                EstimatorName::Arm => Estimator::Arm,
            },
            concrete: Concrete { temperature: m.temperature, standard: m.concrete_standard },
            beta_prior_c: m.beta_prior_c,
            kuma_init_b: m.kuma_init_b,
            kl_variant: if m.kl_full_series { KlVariant::FullSeries } else { KlVariant::Printed },
            kl_weight_scaling: m.kl_weight_scaling,
            use_bias: m.use_bias,
            renormalize_masked: m.renormalize_masked,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let warmup = if t.warmup_epochs == 0 {
            None
        } else {
            Some(WarmupSchedule::new(t.warmup_epochs).map_err(|e| CliError::Config(e.to_string()))?)
        };
        let tc = TrainConfig { epochs: t.epochs, lr: t.lr, l2_factor: t.l2_factor, warmup, patience: t.patience, seed };
        tc.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(tc)
    }

    /// TOML text with every default filled in.
    pub fn resolved_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}
