//! Command-line entry points. Every run gets its own directory holding the
//! resolved config, logs, checkpoints and reports.

mod commands;
pub mod config;
pub mod experiment;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "trajcast", version, about = "Pedestrian trajectory prediction: data, training and evaluation")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Single-threaded numerics so reruns are bit-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Parent directory for run directories (overrides `run.out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Exact run directory instead of `<out>/<timestamp>-<hash>-<command>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Drop the relation module (goal module kept).
    NoRelation,
    /// Drop the goal module: one deterministic prediction.
    NoGoal,
    /// Drop both.
    Baseline,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    #[default]
    Test,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw scenes and write the preprocessed cache.
    PrepareData {
        /// Comma-separated subset of `data.scenes`.
        #[arg(long, value_delimiter = ',')]
        scenes: Option<Vec<String>>,
        /// Check the existing cache against its sources and checksums
        /// instead of rebuilding it.
        #[arg(long)]
        verify: bool,
    },
    /// Pretrain the density-map autoencoder.
    PretrainAe,
    /// Train the trajectory model on top of a pretrained autoencoder.
    Train {
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Defaults to `<out>/autoencoder.safetensors`.
        #[arg(long)]
        ae_checkpoint: Option<PathBuf>,
        /// Continue from a `last.safetensors` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Best-of-K and KDE metrics of a trained model.
    Evaluate {
        /// Defaults to `<out>/model.safetensors`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// `min_ade` or `min_fde_then_ade`.
        #[arg(long)]
        select: Option<String>,
        /// Samples per window for the KDE metric; 0 skips it.
        #[arg(long)]
        kde_samples: Option<usize>,
        #[arg(long, value_enum, default_value_t)]
        split: EvalSplit,
    },
    /// Error increase under Gaussian noise on the observations.
    PerturbEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write a simulated crowd scene in the four-column text format.
    SynthScene {
        #[arg(long)]
        output: PathBuf,
        /// Scene id used inside the file name conventions of the cache.
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 480.0)]
        duration: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the resolved configuration.
    PrintConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::PretrainAe => "pretrain-ae",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::PerturbEval { .. } => "perturb-eval",
            Command::SynthScene { .. } => "synth-scene",
            Command::PrintConfig => "print-config",
        }
    }

    /// Command flags that are shorthands for config overrides; they are
    /// applied last so the resolved config records them.
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Command::Train { ablate: Some(a), .. } => {
                let (rel, goal) = match a {
                    Ablation::NoRelation => (false, true),
                    Ablation::NoGoal => (true, false),
                    Ablation::Baseline => (false, false),
                };
                out.push(format!("model.use_relation={rel}"));
                out.push(format!("model.use_goal={goal}"));
            }
            Command::Evaluate {
                k, select, kde_samples, ..
            } => {
                if let Some(k) = k {
                    out.push(format!("eval.k={k}"));
                }
                if let Some(s) = select {
                    out.push(format!("eval.select={}", toml::Value::String(s.clone())));
                }
                if let Some(s) = kde_samples {
                    out.push(format!("eval.kde_samples={s}"));
                }
            }
            Command::PerturbEval { sigma, k, .. } => {
                if let Some(s) = sigma {
                    out.push(format!("eval.perturb_sigma={s:?}"));
                }
                if let Some(k) = k {
                    out.push(format!("eval.k={k}"));
                }
            }
            _ => {}
        }
        out
    }
}

/// Exit status: 0 success, 1 user or configuration error, 2 internal error.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_user_error() => 1,
        Err(_) => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        // Read by the tensor backend when it sizes its thread pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let mut overrides = cli.set.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("run.out_dir={}", toml::Value::String(out.display().to_string())));
    }
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::SynthScene {
            output,
            name,
            duration,
            seed,
        } => commands::synth_scene(output, name, *duration, *seed),
        Command::PrepareData { scenes, verify } => commands::prepare_data(&cfg, scenes.as_deref(), *verify),
        cmd => {
            let dir = commands::create_run_dir(&cfg, &cli, cmd.name())?;
            log::info!("run directory {}", dir.display());
            match cmd {
                Command::PretrainAe => commands::pretrain_ae(&cfg, &dir),
                Command::Train {
                    ae_checkpoint, resume, ..
                } => commands::train(&cfg, &dir, ae_checkpoint.as_deref(), resume.as_deref()),
                Command::Evaluate { checkpoint, split, .. } => commands::evaluate(&cfg, &dir, checkpoint.as_deref(), *split),
                Command::PerturbEval { checkpoint, .. } => commands::perturb_eval(&cfg, &dir, checkpoint.as_deref()),
                _ => Err(Error::Contract("unhandled command".into())),
            }
        }
    }
}
