//! Subcommand implementations. Workers only compute; every file is written
//! from the calling thread.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gdc_core::data::{make_split, planted_partition, row_normalize, two_clusters, Dataset};
use gdc_core::graph::{lambda_max, POWER_MAX_ITER, POWER_TOL};
use gdc_core::metrics::{total_variation, uncertainty_report, EntropyScale, UncertaintyReport};
use gdc_core::model::{predict_mc, DropParam, GcnConfig, LayerParams};
use gdc_core::train::{
    evaluate, mean_std, seed_result, train_observed, Clock, EpochLog, EpochView, NoClock, Observer, SeedResult,
    TrainOutcome,
};
use gdc_core::{PreparedGraph, SparseMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EntropyScaleName, RunConfig, SyntheticKind};
use crate::error::CliError;
use crate::io::{load_checkpoint, load_content_cites, load_dataset, save_checkpoint, save_dataset};

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.out {
            cfg.output.dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seeds = vec![s];
        }
        if let Some(k) = self.samples {
            cfg.uq.samples = k;
        }
    }
}

/// A split, optionally normalized dataset and its prepared graph.
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: PreparedGraph,
}

pub fn load_data(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let d = &cfg.data;
    let ds = if let (Some(content), Some(cites)) = (&d.content, &d.cites) {
        let loaded = load_content_cites(content, cites)?;
        if loaded.skipped_unknown + loaded.skipped_self_loops > 0 {
            eprintln!(
                "warning: skipped {} citations with unknown ids and {} self-citations",
                loaded.skipped_unknown, loaded.skipped_self_loops
            );
        }
        if let Some(cache) = &d.cache {
            save_dataset(cache, &loaded.dataset)?;
        }
        loaded.dataset
    } else if let Some(cache) = &d.cache {
        let mut ds = load_dataset(cache)?;
        ds.split = None;
        ds
    } else if let Some(s) = &d.synthetic {
        match s.kind {
            SyntheticKind::TwoClusters => two_clusters(s.per_class)?,
            SyntheticKind::PlantedPartition => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                planted_partition(s.classes, s.per_class, s.p_in, s.p_out, s.features, s.feature_noise, &mut rng)?
            }
        }
    } else {
        return Err(CliError::Config("data: no source configured".into()));
    };
    let mut ds = make_split(ds, d.per_class_train, d.n_val, d.n_test)
        .map_err(|e| CliError::Config(format!("data split: {e}")))?;
    if d.normalize_features {
        ds.features = row_normalize(&ds.features);
    }
    let graph = ds.graph(cfg.model.renorm_trick)?;
    Ok(Prepared { dataset: ds, graph })
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Records `‖H − A H / λ‖²` of every hidden output after each epoch.
pub struct TvTracker<'a> {
    adj: &'a SparseMatrix,
    lam: f64,
    normalized: bool,
    pub rows: Vec<(usize, usize, f64)>,
}

impl<'a> TvTracker<'a> {
    pub fn new(graph: &'a PreparedGraph, normalized: bool) -> Result<Self, CliError> {
        let lam = lambda_max(graph.raw(), POWER_TOL, POWER_MAX_ITER)?.value;
        Ok(Self { adj: graph.raw(), lam, normalized, rows: Vec::new() })
    }

    pub fn measure(&self, hidden: &[gdc_core::Tensor]) -> Result<Vec<f64>, CliError> {
        hidden.iter().map(|h| Ok(total_variation(h, self.adj, self.lam, self.normalized)?)).collect()
    }
}

impl Observer for TvTracker<'_> {
    fn wants_hidden(&self) -> bool {
        true
    }

    fn on_epoch(&mut self, view: &EpochView<'_>) -> gdc_core::Result<()> {
        for (l, h) in view.hidden.iter().enumerate() {
            self.rows.push((view.log.epoch, l, total_variation(h, self.adj, self.lam, self.normalized)?));
        }
        Ok(())
    }
}

/// Worker count: `GDC_THREADS` when set, otherwise the available cores,
/// never more than `jobs`.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("GDC_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs `f` over `jobs` on scoped threads and returns results in job order.
pub fn parallel_map<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = worker_count(jobs.len());
    if workers <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn train_one(
    cfg: &RunConfig,
    data: &Prepared,
    model: &GcnConfig,
    seed: u64,
    wall: bool,
) -> Result<TrainOutcome, CliError> {
    let tc = cfg.train_config(seed)?;
    let clock: Box<dyn Clock> = if wall { Box::new(WallClock(Instant::now())) } else { Box::new(NoClock) };
    Ok(train_observed(&data.dataset, &data.graph, model, &tc, clock.as_ref(), &mut ())?)
}

/// Trains every configured seed; the first failure in seed order wins.
pub fn run_all_seeds(
    cfg: &RunConfig,
    data: &Prepared,
    model: &GcnConfig,
    wall: bool,
) -> Result<Vec<(u64, TrainOutcome)>, CliError> {
    let outs = parallel_map(&cfg.train.seeds, |&seed| train_one(cfg, data, model, seed, wall).map(|o| (seed, o)));
    outs.into_iter().collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(CliError::from)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn write_resolved(cfg: &RunConfig) -> Result<(), CliError> {
    create_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join("config_resolved.toml");
    fs::write(&path, cfg.resolved_toml()?).map_err(|e| CliError::io(&path, e))
}

pub fn write_summary(path: &Path, runs: &[SeedResult]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "best_val_acc", "test_acc"])?;
    for r in runs {
        w.write_record([r.seed.to_string(), num(r.best_val_acc), num(r.test_acc)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_epochs(path: &Path, logs: &[EpochLog], layers: usize) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> =
        ["epoch", "train_loss", "nll", "kl", "val_acc", "test_acc"].iter().map(|s| s.to_string()).collect();
    header.extend((0..layers).map(|l| format!("keep_l{l}")));
    header.push("wall_time".into());
    w.write_record(&header)?;
    for log in logs {
        let mut rec = vec![
            log.epoch.to_string(),
            num(log.train_loss),
            num(log.nll),
            num(log.kl),
            num(log.val_acc),
            num(log.test_acc),
        ];
        rec.extend(log.expected_keep.iter().map(|&k| num(k)));
        rec.push(num(log.wall_time));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn print_summary(label: &str, runs: &[SeedResult]) -> Result<(f64, f64), CliError> {
    let acc: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
    let (mean, std) = mean_std(&acc)?;
    println!("{label}test accuracy {:.2} ± {:.2} over {} seeds", 100.0 * mean, 100.0 * std, runs.len());
    Ok((mean, std))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let model = cfg.model_config(data.dataset.n_features(), data.dataset.class_count)?;
    write_resolved(cfg)?;
    let outs = run_all_seeds(cfg, &data, &model, true)?;
    let dir = &cfg.output.dir;
    let mut runs = Vec::with_capacity(outs.len());
    for (seed, out) in &outs {
        write_epochs(&dir.join(format!("epochs_seed{seed}.csv")), &out.logs, model.n_layers())?;
        save_checkpoint(&dir.join(format!("checkpoint_seed{seed}.gdcn")), &out.params)?;
        runs.push(seed_result(*seed, out));
    }
    write_summary(&dir.join("summary.csv"), &runs)?;
    print_summary("", &runs)?;
    Ok(())
}

/// Loads a checkpoint and checks it against the model the config builds.
pub fn load_matching(path: &Path, model: &GcnConfig) -> Result<Vec<LayerParams>, CliError> {
    let params = load_checkpoint(path)?;
    let mismatch = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    if params.len() != model.n_layers() {
        return Err(mismatch(format!("{} layers, config has {}", params.len(), model.n_layers())));
    }
    for (l, p) in params.iter().enumerate() {
        let want = (model.layer_dims[l], model.layer_dims[l + 1]);
        if p.weight.shape() != want {
            return Err(mismatch(format!("layer {l} is {:?}, config expects {want:?}", p.weight.shape())));
        }
        if p.bias.is_some() != model.use_bias {
            return Err(mismatch(format!("layer {l} bias does not match use_bias")));
        }
        if matches!(p.drop, DropParam::Learned(_)) != model.is_learned(l) {
            return Err(mismatch(format!("layer {l} drop parameter does not match the estimator")));
        }
    }
    Ok(params)
}

fn checkpoint_context(cfg: &RunConfig, checkpoint: &Path) -> Result<(Prepared, GcnConfig, Vec<LayerParams>), CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let data = load_data(cfg)?;
    let model = cfg.model_config(data.dataset.n_features(), data.dataset.class_count)?;
    let params = load_matching(checkpoint, &model)?;
    Ok((data, model, params))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(f64, f64), CliError> {
    let (data, model, params) = checkpoint_context(cfg, checkpoint)?;
    let (val, test, _) = evaluate(&model, &params, &data.dataset, &data.graph, false)?;
    create_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join("eval.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["split", "accuracy"])?;
    w.write_record(["val".to_string(), num(val)])?;
    w.write_record(["test".to_string(), num(test)])?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!("val accuracy {:.2}, test accuracy {:.2}", 100.0 * val, 100.0 * test);
    Ok((val, test))
}

/// Monte Carlo uncertainty on the test nodes with `cfg.uq.samples` passes.
/// The sampling stream is seeded from the first configured seed.
pub fn uq_report(cfg: &RunConfig, data: &Prepared, model: &GcnConfig, params: &[LayerParams]) -> Result<UncertaintyReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seeds[0]);
    let mc = predict_mc(model, params, &data.dataset.features, &data.graph, cfg.uq.samples, &mut rng)?;
    let scale = match cfg.uq.entropy_scale {
        EntropyScaleName::ObservedMax => EntropyScale::ObservedMax,
        EntropyScaleName::LogClasses => EntropyScale::LogClasses(data.dataset.class_count),
    };
    let split = data.dataset.split()?;
    Ok(uncertainty_report(&mc.mean, &data.dataset.labels, &split.test, &cfg.uq.threshold_fracs, scale)?)
}

pub fn write_uq(dir: &Path, report: &UncertaintyReport) -> Result<(), CliError> {
    create_dir(dir)?;
    let path = dir.join("pavpu.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["threshold_frac", "pavpu", "p_acc_given_cert", "p_cert_given_inacc"])?;
    for p in &report.points {
        w.write_record([num(p.frac), num(p.pavpu), num(p.p_acc_given_cert), num(p.p_cert_given_inacc)])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let path = dir.join("entropy.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["node", "entropy", "correct"])?;
    for ((node, h), ok) in report.nodes.iter().zip(&report.entropy).zip(&report.correct) {
        w.write_record([node.to_string(), num(*h), u8::from(*ok).to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

pub fn cmd_uq(cfg: &RunConfig, checkpoint: &Path) -> Result<UncertaintyReport, CliError> {
    let (data, model, params) = checkpoint_context(cfg, checkpoint)?;
    let report = uq_report(cfg, &data, &model, &params)?;
    write_uq(&cfg.output.dir, &report)?;
    for p in &report.points {
        println!("frac {:.1}: pavpu {:.4}", p.frac, p.pavpu);
    }
    Ok(report)
}

fn write_tv(path: &Path, rows: &[(usize, usize, f64)]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "layer", "tv"])?;
    for (e, l, tv) in rows {
        w.write_record([e.to_string(), l.to_string(), num(*tv)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// With a checkpoint, one TV row per hidden layer (epoch 0). Without one,
/// trains the first seed and records every hidden layer at every epoch.
/// A config listing several depths also gets `depth_sweep.csv`.
pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let model = cfg.model_config(data.dataset.n_features(), data.dataset.class_count)?;
    write_resolved(cfg)?;
    let dir = &cfg.output.dir;
    let mut tracker = TvTracker::new(&data.graph, cfg.diagnose.normalized)?;
    match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
            }
            let params = load_matching(path, &model)?;
            let (_, _, hidden) = evaluate(&model, &params, &data.dataset, &data.graph, true)?;
            let tv = tracker.measure(&hidden)?;
            tracker.rows = tv.into_iter().enumerate().map(|(l, v)| (0, l, v)).collect();
        }
        None => {
            let tc = cfg.train_config(cfg.train.seeds[0])?;
            let out = train_observed(&data.dataset, &data.graph, &model, &tc, &NoClock, &mut tracker)?;
            write_epochs(&dir.join(format!("epochs_seed{}.csv", tc.seed)), &out.logs, model.n_layers())?;
        }
    }
    write_tv(&dir.join("tv.csv"), &tracker.rows)?;
    println!("wrote {} TV rows", tracker.rows.len());

    if cfg.diagnose.depths.len() > 1 {
        let path = dir.join("depth_sweep.csv");
        let mut rows = Vec::new();
        for &depth in &cfg.diagnose.depths {
            let m = cfg.model_config_with(data.dataset.n_features(), data.dataset.class_count, depth, cfg.model.n_blocks)?;
            let outs = run_all_seeds(cfg, &data, &m, false)?;
            let runs: Vec<SeedResult> = outs.iter().map(|(s, o)| seed_result(*s, o)).collect();
            let (mean, std) = print_summary(&format!("{depth} layers: "), &runs)?;
            rows.push((depth, mean, std, runs.len()));
        }
        let mut w = csv_writer(&path)?;
        w.write_record(["layers", "mean_test_acc", "std_test_acc", "seeds"])?;
        for (d, m, s, k) in rows {
            w.write_record([d.to_string(), num(m), num(s), k.to_string()])?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

/// One summary row per configured block count.
pub fn cmd_sweep_blocks(cfg: &RunConfig) -> Result<Vec<(usize, f64, f64)>, CliError> {
    if cfg.model.block_sweep.is_empty() {
        return Err(CliError::Config("model: block_sweep is empty".into()));
    }
    let data = load_data(cfg)?;
    write_resolved(cfg)?;
    let mut rows = Vec::new();
    for &nb in &cfg.model.block_sweep {
        let m = cfg.model_config_with(data.dataset.n_features(), data.dataset.class_count, cfg.model.layers, nb)?;
        let outs = run_all_seeds(cfg, &data, &m, false)?;
        let runs: Vec<SeedResult> = outs.iter().map(|(s, o)| seed_result(*s, o)).collect();
        let (mean, std) = print_summary(&format!("{nb} blocks: "), &runs)?;
        rows.push((nb, mean, std));
    }
    let path = cfg.output.dir.join("sweep_blocks.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["n_blocks", "mean_test_acc", "std_test_acc", "seeds"])?;
    for &(nb, m, s) in &rows {
        w.write_record([nb.to_string(), num(m), num(s), cfg.train.seeds.len().to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
