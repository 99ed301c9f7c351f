//! Command-line harness: data generation, codec fitting, the two training
//! stages, closed-loop evaluation and the ablation suite.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors, 3 for
//! missing, corrupt or mismatched data, 4 for training divergence and 1 for
//! anything else.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tokvla_core::env::TaskSpec;
use tokvla_core::rollout::ablation::parse_strategies;
use tokvla_core::train::Strategy;

use crate::commands::{EvalArgs, FinetuneArgs, Outcome};
use crate::config::{parse_override, resolve};
use crate::error::{CliError, Result, EXIT_OK, EXIT_USAGE};
use crate::manifest::resolve_out;

#[derive(Debug, Parser)]
#[command(name = "tokvla", version, about = "Tokenized vision-language-action toolkit")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set finetune.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert episodes.
    MakeData {
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated task specs (`single`, `long`).
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the vision codebook, action normalizer and action BPE.
    FitCodecs {
        #[arg(long)]
        dataset: PathBuf,
        /// Codebook size.
        #[arg(long)]
        k: Option<usize>,
        /// DCT coefficient scale.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        bpe_vocab: Option<usize>,
        /// Action chunk length.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: post-train on an action-free (or foreign-action) corpus.
    Posttrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: fine-tune the policy, optionally from a stage-one checkpoint.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        data_fraction: f64,
        /// Past steps kept in the prompt.
        #[arg(long)]
        history: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of a policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        /// Training set whose seeds are excluded from evaluation.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        task: Option<TaskSpec>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        history: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation suite end to end.
    Ablate {
        /// Existing dataset; generated from the `data` settings when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated post-training strategies.
        #[arg(long)]
        arms: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn push<T: Into<toml::Value>>(ov: &mut Vec<(String, toml::Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        ov.push((key.to_string(), v.into()));
    }
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|x| x as i64)
}

fn seed(v: Option<u64>) -> Result<Option<i64>> {
    v.map(|s| i64::try_from(s).map_err(|_| CliError::Usage(format!("seed {s} too large")))).transpose()
}

fn strings(list: Vec<String>) -> toml::Value {
    toml::Value::Array(list.into_iter().map(toml::Value::String).collect())
}

/// Flag-level overrides of one command, in the order they apply.
fn command_overrides(cmd: &Command) -> Result<Vec<(String, toml::Value)>> {
    let mut ov = Vec::new();
    match cmd {
        Command::MakeData { n, task, seed: s, .. } => {
            push(&mut ov, "data.episodes", int(*n));
            if let Some(t) = task {
                let tasks = t
                    .split(',')
                    .map(|x| x.trim().parse::<TaskSpec>().map(|ts| ts.to_string()))
                    .collect::<tokvla_core::Result<Vec<_>>>()?;
                ov.push(("data.tasks".into(), strings(tasks)));
            }
            push(&mut ov, "data.seed", seed(*s)?);
        }
        Command::FitCodecs { k, gamma, bpe_vocab, horizon, .. } => {
            push(&mut ov, "codecs.codebook_size", int(*k));
            push(&mut ov, "codecs.scale", *gamma);
            push(&mut ov, "codecs.action_vocab", int(*bpe_vocab));
            push(&mut ov, "codecs.horizon", int(*horizon));
        }
        Command::Posttrain { steps, .. } => push(&mut ov, "posttrain.steps", int(*steps)),
        Command::Finetune { steps, history, .. } => {
            push(&mut ov, "finetune.steps", int(*steps));
            push(&mut ov, "rollout.history", int(*history));
        }
        Command::Eval { n, task, seed: s, history, .. } => {
            push(&mut ov, "eval.episodes", int(*n));
            push(&mut ov, "eval.task", task.map(|t| t.to_string()));
            push(&mut ov, "eval.seed", seed(*s)?);
            push(&mut ov, "rollout.history", int(*history));
        }
        Command::Ablate { arms, seeds, .. } => {
            if let Some(a) = arms {
                let tags = parse_strategies(a)?.into_iter().map(|s| s.tag().to_string()).collect();
                ov.push(("ablation.strategies".into(), strings(tags)));
            }
            if let Some(s) = seeds {
                let vals = s
                    .split(',')
                    .map(|x| x.trim().parse::<i64>().map_err(|_| CliError::Usage(format!("bad seed {x:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                ov.push((
                    "ablation.seeds".into(),
                    toml::Value::Array(vals.into_iter().map(toml::Value::Integer).collect()),
                ));
            }
        }
    }
    Ok(ov)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut overrides = command_overrides(&cli.command)?;
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    let resolved = resolve(cli.config.as_deref(), &overrides)?;
    for line in &resolved.log {
        eprintln!("config: {line}");
    }
    let cfg = &resolved.config;
    match &cli.command {
        Command::MakeData { out, .. } => commands::make_data(cfg, &resolve_out(out)),
        Command::FitCodecs { dataset, out, .. } => commands::fit_codecs(cfg, dataset, &resolve_out(out)),
        Command::Posttrain { dataset, codecs, strategy, seed, out, .. } => {
            let strategy: Strategy = strategy.parse()?;
            commands::posttrain(cfg, dataset, codecs, strategy, *seed, &resolve_out(out))
        }
        Command::Finetune { dataset, codecs, init, seed, data_fraction, out, .. } => {
            let args =
                FinetuneArgs { dataset, codecs, init: init.as_deref(), seed: *seed, data_fraction: *data_fraction };
            commands::finetune(cfg, &args, &resolve_out(out))
        }
        Command::Eval { checkpoint, codecs, dataset, out, .. } => {
            let args = EvalArgs { checkpoint, codecs, dataset: dataset.as_deref() };
            commands::eval(cfg, &args, &resolve_out(out))
        }
        Command::Ablate { corpus, out, .. } => commands::ablate(cfg, corpus.as_deref(), &resolve_out(out)),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(Outcome::Done(p)) => {
            eprintln!("done: {}", p.display());
            EXIT_OK
        }
        Ok(Outcome::UpToDate(p)) => {
            eprintln!("up to date: {}", p.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
