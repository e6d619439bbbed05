use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graphuq::adf::AdfOptions;
use graphuq::experiment::{
    high_noise_preset, low_variance_preset, run_eval, run_gen_synthetic, run_sweep, run_train,
    DatasetSource, ExperimentConfig, SweepTable,
};
use graphuq::oracle::{
    linear2_fixture, oracle_check, path3_fixture, random_fixture, relu_mlp_fixture, CheckMode,
    FixtureKind,
};
use graphuq::{Error, RngStream, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "graphuq",
    version,
    about = "Graph node classification with propagated uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.json and trace.csv
    Train(Common),
    /// Evaluate a checkpoint at every noise level
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep input noise levels and write the results table
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare propagated moments with Monte-Carlo estimates on a fixture
    OracleCheck(OracleArgs),
    /// Write a planted-partition dataset to disk
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        intra_p: f64,
        #[arg(long, default_value_t = 0.01)]
        inter_p: f64,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    HighNoise,
    LowVariance,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in synthetic experiment
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Comma-separated noise levels in percent
    #[arg(long, value_delimiter = ',')]
    noise_levels: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureName {
    Path3,
    Linear2,
    ReluMlp,
    RandomLinear,
    RandomMixed,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "linear2")]
    fixture: FixtureName,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "layer-wise")]
    mode: Mode,
    /// Accept variances within this relative error
    #[arg(long)]
    rel_var: Option<f64>,
    #[arg(long, hide = true)]
    corrupt_variance: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    LayerWise,
    EndToEnd,
}

fn load_config(
    common: &Common,
    fallback: impl FnOnce() -> ExperimentConfig,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(path), _) => {
            let mut cfg = ExperimentConfig::from_path(path)?;
            if let DatasetSource::Manifest(m) = &mut cfg.dataset {
                if m.is_relative() {
                    *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
                }
            }
            cfg
        }
        (None, Some(Preset::HighNoise)) => high_noise_preset(),
        (None, Some(Preset::LowVariance)) => low_variance_preset(),
        (None, None) => fallback(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = common.mc_samples {
        cfg.mc_samples = m;
    }
    if let Some(levels) = &common.noise_levels {
        cfg.noise_levels = levels.clone();
    }
    if let Some(r) = common.repeats {
        cfg.repeats = r;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig::new(DatasetSource::Synthetic(SyntheticSpec::new(
        300, 3, 0.1, 0.01, 16,
    )))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn print_table(t: &SweepTable) {
    println!("noise_%   accuracy  loss     nll       variance");
    for r in &t.rows {
        println!(
            "{:<9} {:<9.4} {:<8.4} {:<9} {}",
            r.noise_level_pct,
            r.accuracy,
            r.prediction_loss,
            fmt_opt(r.avg_per_class_nll),
            fmt_opt(r.mean_output_variance)
        );
    }
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common, default_config)?;
            let run = run_train(&cfg)?;
            if let Some(last) = run.trace.last() {
                println!(
                    "epoch {}: train loss {:.4}, val accuracy {:.4}",
                    last.epoch, last.train_loss, last.val_accuracy
                );
            }
            println!("wrote {}", run.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common, default_config)?;
            let out = run_eval(&cfg, checkpoint.as_deref())?;
            println!("deterministic accuracy {:.4}", out.deterministic_accuracy);
            for r in &out.reports {
                println!(
                    "noise {}%: accuracy {:.4}, loss {:.4}, nll {}, variance {:.6}",
                    r.noise_level_pct,
                    r.accuracy,
                    r.prediction_loss,
                    fmt_opt(r.avg_per_class_nll),
                    r.mean_output_variance
                );
            }
        }
        Command::Sweep { common, checkpoint } => {
            let cfg = load_config(&common, default_config)?;
            let table = run_sweep(&cfg, checkpoint.as_deref())?;
            print_table(&table);
        }
        Command::GenSynthetic {
            common,
            nodes,
            classes,
            intra_p,
            inter_p,
            feature_dim,
        } => {
            let cfg = load_config(&common, || {
                ExperimentConfig::new(DatasetSource::Synthetic(SyntheticSpec::new(
                    nodes,
                    classes,
                    intra_p,
                    inter_p,
                    feature_dim,
                )))
            })?;
            let path = run_gen_synthetic(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::OracleCheck(args) => {
            let fixture = match args.fixture {
                FixtureName::Path3 => path3_fixture(),
                FixtureName::Linear2 => linear2_fixture(),
                FixtureName::ReluMlp => relu_mlp_fixture(),
                FixtureName::RandomLinear => random_fixture(
                    FixtureKind::Linear,
                    &mut RngStream::new(args.seed, graphuq::streams::FIXTURE),
                ),
                FixtureName::RandomMixed => random_fixture(
                    FixtureKind::Mixed,
                    &mut RngStream::new(args.seed, graphuq::streams::FIXTURE),
                ),
            };
            let mode = match args.mode {
                Mode::LayerWise => CheckMode::LayerWise,
                Mode::EndToEnd => CheckMode::EndToEnd,
            };
            let opts = AdfOptions {
                corrupt_aggregate_variance: args.corrupt_variance,
            };
            let report = oracle_check(&fixture, args.samples, args.seed, mode, args.rel_var, opts)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
