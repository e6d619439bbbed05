//! Experiment runs driven by a JSON config: training, evaluation, and the
//! input-noise sweep. Every run writes `run_manifest.json` next to its
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{
    derive_noise_variance, generate_synthetic, load_dataset, make_splits, save_dataset,
    DatasetManifest, Graph, SyntheticSpec,
};
use crate::linalg::RngStream;
use crate::model::{accuracy, full_forward, ModelParams};
use crate::streams;
use crate::train::{train, EpochStats, TrainConfig};
use crate::uq::{evaluate, write_csv, ReportSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Path to a dataset manifest, relative to the working directory.
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// Input noise levels in percent of the grand feature mean.
    #[serde(default = "default_noise_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Independent repetitions; repetition `r` uses seed `seed + r`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_split() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

fn default_noise_levels() -> Vec<f64> {
    vec![0.0, 2.5, 5.0, 12.0]
}

fn default_mc_samples() -> usize {
    100
}

fn default_repeats() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            train: TrainConfig::default(),
            split: default_split(),
            noise_levels: default_noise_levels(),
            mc_samples: default_mc_samples(),
            repeats: default_repeats(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses and validates a JSON config held in memory.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<string>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.mc_samples == 0 {
            return Err(Error::Validation("mc_samples must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Validation("repeats must be at least 1".into()));
        }
        if self
            .noise_levels
            .iter()
            .any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return Err(Error::Validation(
                "noise levels must be finite and >= 0".into(),
            ));
        }
        if self.noise_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "noise levels must be strictly ascending".into(),
            ));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(*f >= 0.0)) || a + b + c > 1.0 + 1e-12 {
            return Err(Error::Validation(format!(
                "bad split fractions {:?}",
                self.split
            )));
        }
        Ok(())
    }

    /// Seed of repetition `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    /// Hex SHA-256 of the config's JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Provenance of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, outputs: &[&str]) -> Result<PathBuf> {
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
    };
    let path = cfg.output_dir.join("run_manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// The dataset of repetition `seed`, with a fresh random split.
pub fn load_graph(cfg: &ExperimentConfig, seed: u64) -> Result<Graph> {
    let g = match &cfg.dataset {
        DatasetSource::Manifest(path) => load_dataset(&DatasetManifest::from_path(path)?)?,
        DatasetSource::Synthetic(spec) => {
            generate_synthetic(spec, &mut RngStream::new(seed, streams::SYNTHETIC))?
        }
    };
    make_splits(g, cfg.split, &mut RngStream::new(seed, streams::SPLIT))
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn check_compatible(params: &ModelParams, g: &Graph) -> Result<()> {
    if params.input_dim() != g.feature_dim() || params.output_dim() != g.num_classes() {
        return Err(Error::Validation(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            params.input_dim(),
            params.output_dim(),
            g.feature_dim(),
            g.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub trace: Vec<EpochStats>,
    pub checkpoint: PathBuf,
}

/// Trains on the first repetition's split and writes `checkpoint.json` and
/// `trace.csv`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.repeat_seed(0);
    let g = load_graph(cfg, seed)?;
    let out = train(&g, &train_config(cfg, seed))?;
    let checkpoint = cfg.output_dir.join("checkpoint.json");
    out.params.save(&checkpoint)?;
    write_csv(&cfg.output_dir.join("trace.csv"), &out.trace)?;
    write_manifest(cfg, "train", &["checkpoint.json", "trace.csv"])?;
    Ok(TrainRun {
        params: out.params,
        trace: out.trace,
        checkpoint,
    })
}

/// Results of evaluating one checkpoint at every configured noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    /// Test accuracy of the plain forward pass: no noise, no dropout.
    pub deterministic_accuracy: f64,
    pub reports: Vec<ReportSummary>,
}

fn level_tag(level: f64) -> String {
    format!("{level}").replace('.', "p")
}

fn load_or_train(
    cfg: &ExperimentConfig,
    g: &Graph,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<ModelParams> {
    match checkpoint {
        Some(path) => {
            let params = ModelParams::load(path)?;
            check_compatible(&params, g)?;
            Ok(params)
        }
        None => Ok(train(g, &train_config(cfg, seed))?.params),
    }
}

/// Evaluates a checkpoint (or a freshly trained model) on the first
/// repetition's split. Writes `eval.json` and one per-node CSV per level.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutput> {
    cfg.validate()?;
    ensure_dir(&cfg.output_dir)?;
    let seed = cfg.repeat_seed(0);
    let g = load_graph(cfg, seed)?;
    let params = load_or_train(cfg, &g, seed, checkpoint)?;
    let probs = full_forward(&params, &g, g.features(), None)?;
    let mut outputs = vec!["eval.json".to_string()];
    let mut reports = Vec::new();
    for &level in &cfg.noise_levels {
        let noise = derive_noise_variance(&g, level)?;
        let report = evaluate(&params, &g, &noise, cfg.mc_samples, seed)?;
        let name = format!("nodes_{}.csv", level_tag(level));
        report.write_node_csv(cfg.output_dir.join(&name))?;
        outputs.push(name);
        reports.push(report.summary);
    }
    let out = EvalOutput {
        deterministic_accuracy: accuracy(&probs, g.labels(), &g.splits().test),
        reports,
    };
    write_json(&cfg.output_dir.join("eval.json"), &out)?;
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(cfg, "eval", &names)?;
    Ok(out)
}

/// One row of the sweep table, averaged over repetitions. Output variance
/// and NLL are left empty at zero input noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise_level_pct: f64,
    pub accuracy: f64,
    pub prediction_loss: f64,
    pub avg_per_class_nll: Option<f64>,
    pub mean_output_variance: Option<f64>,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    pub mean_logit_variance: f64,
    pub repeats: usize,
}

/// Unaveraged sweep result of a single repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunRow {
    pub repeat: usize,
    pub seed: u64,
    pub noise_level_pct: f64,
    pub accuracy: f64,
    pub prediction_loss: f64,
    pub avg_per_class_nll: Option<f64>,
    pub mean_output_variance: f64,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    pub mean_logit_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRunRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// The noise sweep without file output. With a checkpoint the same model is
/// reused at every level (one repetition only); otherwise each repetition
/// trains its own model once and evaluates it at every level.
pub fn sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SweepTable> {
    cfg.validate()?;
    if checkpoint.is_some() && cfg.repeats != 1 {
        return Err(Error::Validation(
            "a fixed checkpoint can only be swept with repeats = 1".into(),
        ));
    }
    let mut runs = Vec::new();
    for r in 0..cfg.repeats {
        let seed = cfg.repeat_seed(r);
        let g = load_graph(cfg, seed)?;
        let params = load_or_train(cfg, &g, seed, checkpoint)?;
        for &level in &cfg.noise_levels {
            let noise = derive_noise_variance(&g, level)?;
            let s = evaluate(&params, &g, &noise, cfg.mc_samples, seed)?.summary;
            runs.push(SweepRunRow {
                repeat: r,
                seed,
                noise_level_pct: level,
                accuracy: s.accuracy,
                prediction_loss: s.prediction_loss,
                avg_per_class_nll: s.avg_per_class_nll,
                mean_output_variance: s.mean_output_variance,
                mean_aleatoric: s.mean_aleatoric,
                mean_epistemic: s.mean_epistemic,
                mean_logit_variance: s.mean_logit_variance,
            });
        }
    }
    let rows = cfg
        .noise_levels
        .iter()
        .map(|&level| {
            let at: Vec<&SweepRunRow> =
                runs.iter().filter(|r| r.noise_level_pct == level).collect();
            let nlls: Vec<f64> = at.iter().filter_map(|r| r.avg_per_class_nll).collect();
            let noisy = level > 0.0;
            SweepRow {
                noise_level_pct: level,
                accuracy: mean(at.iter().map(|r| r.accuracy)),
                prediction_loss: mean(at.iter().map(|r| r.prediction_loss)),
                avg_per_class_nll: (noisy && !nlls.is_empty()).then(|| mean(nlls.into_iter())),
                mean_output_variance: noisy
                    .then(|| mean(at.iter().map(|r| r.mean_output_variance))),
                mean_aleatoric: mean(at.iter().map(|r| r.mean_aleatoric)),
                mean_epistemic: mean(at.iter().map(|r| r.mean_epistemic)),
                mean_logit_variance: mean(at.iter().map(|r| r.mean_logit_variance)),
                repeats: at.len(),
            }
        })
        .collect();
    Ok(SweepTable { rows, runs })
}

/// Runs [`sweep`] and writes `sweep.csv`, `sweep_runs.csv` and `sweep.json`.
pub fn run_sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<SweepTable> {
    ensure_dir(&cfg.output_dir)?;
    let table = sweep(cfg, checkpoint)?;
    write_csv(&cfg.output_dir.join("sweep.csv"), &table.rows)?;
    write_csv(&cfg.output_dir.join("sweep_runs.csv"), &table.runs)?;
    write_json(&cfg.output_dir.join("sweep.json"), &table)?;
    write_manifest(cfg, "sweep", &["sweep.csv", "sweep_runs.csv", "sweep.json"])?;
    Ok(table)
}

/// Writes the synthetic dataset of the first repetition to disk and returns
/// its manifest path.
pub fn run_gen_synthetic(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let spec = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => spec,
        DatasetSource::Manifest(_) => {
            return Err(Error::Validation("config dataset is not synthetic".into()))
        }
    };
    ensure_dir(&cfg.output_dir)?;
    let g = generate_synthetic(
        spec,
        &mut RngStream::new(cfg.repeat_seed(0), streams::SYNTHETIC),
    )?;
    let path = save_dataset(&g, &cfg.output_dir, "synthetic")?;
    write_manifest(
        cfg,
        "gen-synthetic",
        &["manifest.json", "nodes.csv", "edges.csv"],
    )?;
    Ok(path)
}

/// Separable three-class graph swept at noise levels large enough to push
/// the mean output variance from about 0.1 to 0.3, where accuracy falls
/// steeply with noise.
pub fn high_noise_preset() -> ExperimentConfig {
    let spec = SyntheticSpec {
        nodes: 300,
        classes: 3,
        intra_p: 0.1,
        inter_p: 0.01,
        feature_dim: 16,
        signal: 3.0,
        offset: 0.0,
        label_noise: 0.0,
    };
    ExperimentConfig {
        noise_levels: vec![0.0, 1250.0, 2500.0, 6000.0],
        ..ExperimentConfig::new(DatasetSource::Synthetic(spec))
    }
}

/// A confident model with a few mislabelled nodes, swept at the default
/// noise levels: output variance stays well below 0.01 while the rare
/// errors are made with near-certainty.
pub fn low_variance_preset() -> ExperimentConfig {
    let spec = SyntheticSpec {
        nodes: 400,
        classes: 3,
        intra_p: 0.05,
        inter_p: 0.02,
        feature_dim: 64,
        signal: 2.0,
        offset: 0.0,
        label_noise: 0.02,
    };
    ExperimentConfig {
        train: TrainConfig {
            learning_rate: 0.005,
            epochs: 100,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::new(DatasetSource::Synthetic(spec))
    }
}
