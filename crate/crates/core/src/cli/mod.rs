//! Command-line front end: `train`, `eval`, `analyze` and `export-dot`.

pub mod analyze;
pub mod config;
pub mod train;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use crate::modnet::checkpoint::CheckpointError;
pub use analyze::{load_run, LoadedRun};
pub use config::{ConfigError, RunConfig};
pub use train::{train, train_until, TrainSummary};

/// A problem with the user's input rather than with the program.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "d2r", version, about = "Dynamic depth routing for multi-task SAC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured task suite.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for metrics, config copy and checkpoints;
        /// defaults to runs/<config hash prefix>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Deterministic success rates of a checkpoint.
    Eval {
        #[arg(long = "ckpt", visible_alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// CSV destination; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routing statistics of a checkpoint.
    #[command(subcommand)]
    Analyze(Analysis),
    /// Routing graph of one task in Graphviz DOT.
    ExportDot {
        #[arg(long = "ckpt", visible_alias = "checkpoint")]
        checkpoint: PathBuf,
        /// Task name or index.
        #[arg(long)]
        task: String,
        /// Deterministic steps taken before the snapshot.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Explicit observation, comma separated; overrides `--step`.
        #[arg(long, allow_hyphen_values = true)]
        state: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run config.
    DefaultConfig,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Effective modules per decision, by task.
    Usage {
        #[arg(long = "ckpt", visible_alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-decision routing records as JSON lines.
    Trace {
        #[arg(long = "ckpt", visible_alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distribution of modules by number of sources above 1% probability.
    Sparsity {
        #[arg(long = "ckpt", visible_alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for a failed command: 1 for bad input, 2 for internal faults.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let user = err.chain().any(|c| {
        c.is::<UsageError>()
            || c.is::<ConfigError>()
            || c.is::<CheckpointError>()
            || c.downcast_ref::<io::Error>()
                .is_some_and(|e| matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied))
    });
    if user {
        1
    } else {
        2
    }
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_state(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| UsageError(format!("bad state value {x:?}")).into())
        })
        .collect()
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
            info!("config {} -> {}", cfg.hash(), out.display());
            let s = train(&cfg, &out, resume)?;
            let mean = if s.last_eval.is_empty() {
                0.0
            } else {
                s.last_eval.iter().map(|e| e.success_rate()).sum::<f64>() / s.last_eval.len() as f64
            };
            println!(
                "{} env steps, {} updates, final mean success {mean:.3}; checkpoint {}",
                s.env_steps,
                s.train_steps,
                s.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            out,
        } => {
            let run = load_run(&checkpoint)?;
            let evals = if episodes == 0 {
                Vec::new()
            } else {
                run.evaluate(episodes)?
            };
            print!("{}", analyze::eval_table(&run, &evals));
            let path = out.unwrap_or_else(|| checkpoint.with_file_name("eval.csv"));
            emit(&analyze::eval_csv(&run, &evals), Some(&path))?;
        }
        Command::Analyze(Analysis::Usage {
            checkpoint,
            samples,
            out,
        }) => {
            let run = load_run(&checkpoint)?;
            let counts = run.usage(samples)?;
            emit(&analyze::usage_csv(&run, &counts), out.as_deref())?;
        }
        Command::Analyze(Analysis::Trace {
            checkpoint,
            samples,
            out,
        }) => {
            let run = load_run(&checkpoint)?;
            let mut text = String::new();
            for rec in run.trace(samples)? {
                text.push_str(&serde_json::to_string(&rec)?);
                text.push('\n');
            }
            emit(&text, out.as_deref())?;
        }
        Command::Analyze(Analysis::Sparsity {
            checkpoint,
            samples,
            out,
        }) => {
            let run = load_run(&checkpoint)?;
            let hist = run.sparsity(samples)?;
            emit(&analyze::sparsity_csv(&hist), out.as_deref())?;
        }
        Command::ExportDot {
            checkpoint,
            task,
            step,
            state,
            out,
        } => {
            let run = load_run(&checkpoint)?;
            let state = state.as_deref().map(parse_state).transpose()?;
            emit(&run.dot(&task, step, state)?, out.as_deref())?;
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().canonical()),
    }
    Ok(())
}
