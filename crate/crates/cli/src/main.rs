use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nsl_cli::commands::{self, FieldSource, SweepAxis};
use nsl_cli::RunConfig;
use nsl_core::guidance::NagMode;

#[derive(Parser)]
#[command(name = "nsl", version, about = "Noise-shift laboratory for toy diffusion models")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the stage this command runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NagModeArg {
    Off,
    ClassifierFree,
    ClassifierBased,
}

impl From<NagModeArg> for NagMode {
    fn from(m: NagModeArg) -> Self {
        match m {
            NagModeArg::Off => NagMode::Off,
            NagModeArg::ClassifierFree => NagMode::ClassifierFree,
            NagModeArg::ClassifierBased => NagMode::ClassifierBased,
        }
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// Velocity checkpoint; defaults to the one `train` wrote.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use exact mixture velocities instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// CFG weight (default 1.5, or 1.2 together with NAG).
    #[arg(long)]
    w_cfg: Option<f64>,
    /// NAG weight (default 3.0, or 2.0 together with CFG).
    #[arg(long)]
    w_nag: Option<f64>,
    #[arg(long, value_enum)]
    nag_mode: Option<NagModeArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the velocity model.
    Train,
    /// Train the noise-level estimator.
    TrainEstimator {
        #[arg(long)]
        force: bool,
    },
    /// Draw samples from a trained model.
    Sample {
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
        /// Also write full trajectories (CSV and binary).
        #[arg(long)]
        trajectories: bool,
        /// Estimator checkpoint, needed for classifier-based NAG.
        #[arg(long)]
        estimator: Option<PathBuf>,
    },
    /// Measure noise shift for bare, CFG, NAG and CFG+NAG sampling.
    Diagnose {
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Sweep w_nag or the step count and report SW2 and mean shift.
    Sweep {
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        estimator: Option<PathBuf>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn apply_sampling(cfg: &mut RunConfig, a: &SamplingArgs) {
    if let Some(m) = a.nag_mode {
        cfg.guidance.nag_mode = m.into();
    }
    if a.w_cfg.is_some() {
        cfg.guidance.w_cfg = a.w_cfg;
    }
    if a.w_nag.is_some() {
        cfg.guidance.w_nag = a.w_nag;
    }
    if let Some(t) = a.tau {
        cfg.guidance.tau = t;
    }
    if let Some(s) = a.steps {
        cfg.sampler.steps = s;
    }
}

fn source(cfg: &RunConfig, a: &SamplingArgs) -> FieldSource {
    if a.oracle {
        FieldSource::Oracle
    } else {
        FieldSource::Checkpoint(a.checkpoint.clone().unwrap_or_else(|| commands::default_checkpoint(cfg)))
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NSL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("NSL_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::Train => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let every = (cfg.train.steps / 20).max(1);
            let summary = commands::cmd_train(&cfg, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>7}  loss {loss:.5}");
                }
            })?;
            println!("wrote {} and {}", summary.model_path.display(), summary.ema_path.display());
        }
        Command::TrainEstimator { force } => {
            if let Some(s) = cli.seed {
                cfg.estimator.seed = s;
            }
            cfg.validate()?;
            let path = commands::cmd_train_estimator(&cfg, *force)?;
            println!("wrote {}", path.display());
        }
        Command::Sample { sampling, n, class, trajectories, estimator } => {
            apply_sampling(&mut cfg, sampling);
            if let Some(s) = cli.seed {
                cfg.sampler.seed = s;
            }
            if let Some(n) = n {
                cfg.sample.n = *n;
            }
            if class.is_some() {
                cfg.sample.class = *class;
            }
            cfg.sample.write_trajectories |= *trajectories;
            cfg.validate()?;
            let out = commands::cmd_sample(&cfg, &source(&cfg, sampling), estimator.as_deref())?;
            println!("wrote {}", out.samples_path.display());
        }
        Command::Diagnose { sampling, estimator, n } => {
            apply_sampling(&mut cfg, sampling);
            if let Some(s) = cli.seed {
                cfg.sampler.seed = s;
            }
            if let Some(n) = n {
                cfg.diagnose.n = *n;
            }
            cfg.validate()?;
            let est = estimator.clone().unwrap_or_else(|| cfg.output_dir.join(commands::ESTIMATOR_FILE));
            let out = commands::cmd_diagnose(&cfg, &source(&cfg, sampling), &est)?;
            for (name, rep) in &out.arms {
                let (lo, hi) = commands::SHIFT_WINDOW;
                println!("{name:>8}: mean normalized shift on [{lo}, {hi}] = {:.5}", rep.mean_normalized_delta(lo, hi).unwrap_or(f64::NAN));
            }
        }
        Command::Sweep { sampling, axis, values, estimator } => {
            apply_sampling(&mut cfg, sampling);
            if let Some(s) = cli.seed {
                cfg.sampler.seed = s;
            }
            cfg.validate()?;
            let rows = commands::cmd_sweep(&cfg, &source(&cfg, sampling), *axis, values, estimator.as_deref())?;
            for r in rows {
                println!("{} = {}: sw2 {:.5} ± {:.5}", axis.name(), r.axis_value, r.sw2_mean, r.sw2_se);
            }
        }
        Command::ShowConfig => print!("{}", commands::cmd_show_config(&cfg)?),
    }
    Ok(())
}
