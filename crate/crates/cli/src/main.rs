use std::path::PathBuf;
use std::process::ExitCode;

use arrange_cli::commands::{self, Predictor};
use arrange_cli::config::{RunConfig, Split};
use arrange_cli::{CliError, Result};
use arrange_core::metrics::PctMode;
use arrange_model::train::{OptimizerConfig, OptimizerKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "arrange", version, about = "Rigid tooth arrangement with a differentiable collision term")]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out-dir.
    Gen(GenArgs),
    /// Slide cloud V along its translation until it touches cloud U.
    Attach(AttachArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate one model per collision weight.
    SweepLambdaC(SweepArgs),
    /// Measure predicted arch widths of a conditioned model under width offsets.
    ArchSweep(ArchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    cases: Option<usize>,
    /// Malocclusion severity multiplier.
    #[arg(long)]
    severity: Option<f64>,
    /// Relative train/val/test sizes, e.g. 200,28,56.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<usize>>,
}

#[derive(Args)]
struct AttachArgs {
    /// Fixed cloud (.ply or .xyz).
    u: PathBuf,
    /// Moving cloud.
    v: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct GridArgs {
    /// Grid interval R in mm.
    #[arg(long)]
    interval: Option<f64>,
    /// Grid cells per side.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Condition on the arch-width vector.
    #[arg(long)]
    conditioned: bool,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    points_per_tooth: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    GroundTruth,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum PctArg {
    PerCase,
    PerTooth,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, value_enum)]
    pct_mode: Option<PctArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Score a reference predictor instead of a model.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Collision weights, e.g. 0,2.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Offsets as left:right pairs, e.g. 0:0,2:2,-2:-2,2:-2.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    deltas: Option<Vec<String>>,
    #[command(flatten)]
    eval: EvalFlags,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(kind) = self.optimizer {
            let base = t.optimizer;
            t.optimizer = match kind {
                OptimizerArg::Sgd => OptimizerConfig {
                    kind: OptimizerKind::Sgd { momentum: 0.0 },
                    ..base
                },
                OptimizerArg::Adam => OptimizerConfig {
                    kind: OptimizerConfig::adam(base.lr).kind,
                    ..base
                },
            };
        }
        if let Some(v) = self.lr {
            t.optimizer.lr = v;
        }
        if let Some(v) = self.weight_decay {
            t.optimizer.weight_decay = v;
        }
        if let Some(v) = self.lambda_c {
            t.weights.lambda_c = v;
        }
        if self.conditioned {
            t.encoder.conditioned = true;
        }
        if let Some(v) = self.feature_dim {
            t.encoder.feature_dim = v;
        }
        if let Some(v) = self.points_per_tooth {
            t.encoder.points_per_tooth = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.split {
            cfg.eval.split = s;
        }
        if let Some(m) = self.pct_mode {
            cfg.eval.pct_mode = match m {
                PctArg::PerCase => PctMode::PerCase,
                PctArg::PerTooth => PctMode::PerTooth,
            };
        }
    }
}

fn parse_delta(s: &str) -> Result<[f64; 2]> {
    let bad = || CliError::Config(format!("delta {s:?} is not of the form left:right"));
    let (l, r) = s.split_once(':').ok_or_else(bad)?;
    Ok([l.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?])
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = &cli.out_dir;
    match cli.command {
        Command::Gen(a) => {
            if let Some(v) = a.cases {
                cfg.dataset.cases = v;
            }
            if let Some(v) = a.severity {
                cfg.dataset.severity = v;
            }
            if let Some(v) = a.split {
                cfg.dataset.split = [v[0], v[1], v[2]];
            }
            let cfg = cfg.resolved();
            cfg.validate()?;
            commands::cmd_gen(&cfg, out)?;
        }
        Command::Attach(a) => {
            let at = &mut cfg.attach;
            if let Some(v) = a.lr {
                at.lr = v;
            }
            if let Some(v) = a.tol {
                at.tol = v;
            }
            if let Some(v) = a.max_iters {
                at.max_iters = v;
            }
            if let Some(v) = a.grid.interval {
                at.grid.interval = v;
            }
            if let Some(v) = a.grid.resolution {
                at.grid.rows = v;
                at.grid.cols = v;
            }
            let cfg = cfg.resolved();
            cfg.validate()?;
            commands::cmd_attach(&cfg, &a.u, &a.v, out)?;
        }
        Command::Train(a) => {
            a.flags.apply(&mut cfg);
            commands::cmd_train(&cfg.resolved(), &a.data, out)?;
        }
        Command::Eval(a) => {
            a.eval.apply(&mut cfg);
            let predictor = match (a.checkpoint, a.baseline) {
                (Some(p), _) => Predictor::Checkpoint(p),
                (None, Some(Baseline::GroundTruth)) => Predictor::GroundTruth,
                (None, Some(Baseline::Identity)) => Predictor::Identity,
                (None, None) => return Err(CliError::Config("give --checkpoint or --baseline".into())),
            };
            commands::cmd_eval(&cfg.resolved(), &a.data, &predictor, out)?;
        }
        Command::SweepLambdaC(a) => {
            a.flags.apply(&mut cfg);
            a.eval.apply(&mut cfg);
            if let Some(v) = a.values {
                cfg.sweep.lambda_c = v;
            }
            commands::cmd_sweep_lambda_c(&cfg.resolved(), &a.data, out)?;
        }
        Command::ArchSweep(a) => {
            a.eval.apply(&mut cfg);
            if let Some(d) = a.deltas {
                cfg.arch_sweep.deltas = d.iter().map(|s| parse_delta(s)).collect::<Result<_>>()?;
            }
            commands::cmd_arch_sweep(&cfg.resolved(), &a.data, &a.checkpoint, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
