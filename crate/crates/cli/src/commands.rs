//! The subcommands. Each resolves its inputs, derives a run id, and either
//! short-circuits on a matching finished run or does the work and records
//! a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tokvla_core::codecs::Codecs;
use tokvla_core::env::{generate_dataset, read_episodes, write_episodes, Episode};
use tokvla_core::model::ModelParams;
use tokvla_core::rollout::ablation::ablation_suite;
use tokvla_core::rollout::{eval_seeds, evaluate, Policy, RolloutConfig};
use tokvla_core::sequence::SequenceBuilder;
use tokvla_core::train::{
    load_checkpoint, metrics_to_text, pack_actions, pack_stage_one, run_stage, save_checkpoint, smoothed_action_loss,
    subset_indices, tokenize_episode, MetricRecord, Strategy, TokenizedEpisode, TrainConfig, FINAL_CHECKPOINT,
    STAGE_ONE_CHECKPOINT,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{hash_dir, hash_file, run_id, Artifact, Input, RunDir, RunManifest, LOCK_FILE, MANIFEST_FILE};
use crate::plot;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const LOSS_PLOT: &str = "loss.png";
pub const REPORT_FILE: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SUCCESS_PLOT: &str = "success.png";
const PROGRESS_EVERY: usize = 100;

/// What a command did.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done(PathBuf),
    UpToDate(PathBuf),
}

/// A command's identity before any work is done.
struct Plan<'a> {
    command: &'static str,
    args: serde_json::Value,
    config: &'a RunConfig,
    inputs: Vec<Input>,
}

impl Plan<'_> {
    fn id(&self) -> String {
        let cfg = serde_json::to_value(self.config).expect("config serializes");
        run_id(self.command, &self.args, &cfg, &self.inputs)
    }

    /// Locks `out`; `None` when it already holds this finished run.
    fn open(&self, out: &Path) -> Result<Option<(RunDir, String)>> {
        let dir = RunDir::lock(out)?;
        let id = self.id();
        if dir.completed(&id)?.is_some() {
            return Ok(None);
        }
        Ok(Some((dir, id)))
    }

    fn finish(
        self,
        dir: &RunDir,
        id: String,
        checkpoints: Vec<Artifact>,
        metrics: Vec<Artifact>,
        outputs: Vec<Artifact>,
    ) -> Result<Outcome> {
        let manifest = RunManifest {
            run_id: id,
            command: self.command.to_string(),
            args: self.args,
            config: serde_json::to_value(self.config).expect("config serializes"),
            inputs: self.inputs,
            checkpoints,
            metrics,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        dir.finish(&manifest)?;
        Ok(Outcome::Done(dir.path.clone()))
    }
}

fn dataset_input(path: &Path) -> Result<Input> {
    Ok(Input { role: "dataset".into(), path: path.to_path_buf(), sha256: hash_dir(path)? })
}

fn codecs_input(path: &Path) -> Result<Input> {
    Ok(Input { role: "codecs".into(), path: path.to_path_buf(), sha256: hash_dir(path)? })
}

fn checkpoint_input(path: &Path) -> Result<Input> {
    Ok(Input { role: "checkpoint".into(), path: path.to_path_buf(), sha256: hash_file(path)? })
}

/// Every regular file under `sub` (or the run directory), sorted, skipping
/// bookkeeping.
fn files_in(dir: &RunDir, sub: &str) -> Result<Vec<Artifact>> {
    let base = if sub.is_empty() { dir.path.clone() } else { dir.path.join(sub) };
    let mut names: Vec<String> = fs::read_dir(&base)
        .map_err(|e| CliError::io(&base, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE && n != LOCK_FILE)
        .collect();
    names.sort();
    names.iter().map(|n| dir.artifact(&if sub.is_empty() { n.clone() } else { format!("{sub}/{n}") })).collect()
}

fn tokenize(episodes: &[Episode], codecs: &Codecs) -> Result<Vec<TokenizedEpisode>> {
    Ok(episodes.iter().map(|e| tokenize_episode(e, codecs)).collect::<tokvla_core::Result<Vec<_>>>()?)
}

fn progress(label: &str) -> impl FnMut(&MetricRecord) + '_ {
    move |r: &MetricRecord| {
        if r.step.is_multiple_of(PROGRESS_EVERY) {
            eprintln!("{label} step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    }
}

fn write_training_outputs(
    dir: &RunDir,
    ckpt: &str,
    params: &ModelParams<f32>,
    log: &[MetricRecord],
    window: usize,
) -> Result<(Artifact, Artifact, Artifact)> {
    save_checkpoint(params, &dir.file(ckpt))?;
    dir.write(METRICS_FILE, metrics_to_text(log).as_bytes())?;
    let mut series = vec![log.iter().map(|r| r.loss).collect::<Vec<_>>()];
    if log.iter().any(|r| r.action_loss.is_some()) {
        series.push(smoothed_action_loss(log, window));
    }
    plot::save(&plot::curves(&series), &dir.file(LOSS_PLOT))?;
    Ok((dir.artifact(ckpt)?, dir.artifact(METRICS_FILE)?, dir.artifact(LOSS_PLOT)?))
}

pub fn make_data(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let plan = Plan { command: "make-data", args: json!({}), config: cfg, inputs: vec![] };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let (episodes, stats) = generate_dataset(cfg.data.episodes, &cfg.data.tasks, cfg.data.seed)?;
    write_episodes(&dir.path, &episodes)?;
    eprintln!(
        "make-data: {} episodes ({} attempted, {} filtered short), {} of {} frames kept",
        episodes.len(),
        stats.attempted,
        stats.filtered_short,
        stats.kept_frames,
        stats.raw_frames
    );
    let outputs = files_in(&dir, "")?;
    plan.finish(&dir, id, vec![], vec![], outputs)
}

pub fn fit_codecs(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Outcome> {
    let plan = Plan { command: "fit-codecs", args: json!({}), config: cfg, inputs: vec![dataset_input(dataset)?] };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let episodes = read_episodes(dataset)?;
    let codecs = Codecs::fit(&episodes, &cfg.codecs)?;
    codecs.save(&dir.path)?;
    eprintln!(
        "fit-codecs: vocabulary {} ({} vision, {} action)",
        codecs.vocab.total_size(),
        codecs.vq.len(),
        codecs.action.bpe.vocab_size()
    );
    let outputs = files_in(&dir, "")?;
    plan.finish(&dir, id, vec![], vec![], outputs)
}

pub fn posttrain(
    cfg: &RunConfig,
    dataset: &Path,
    codecs_dir: &Path,
    strategy: Strategy,
    seed: u64,
    out: &Path,
) -> Result<Outcome> {
    if matches!(strategy, Strategy::None | Strategy::Policy) {
        return Err(CliError::Usage(format!("{strategy} has no post-training stage")));
    }
    let plan = Plan {
        command: "posttrain",
        args: json!({ "strategy": strategy, "seed": seed }),
        config: cfg,
        inputs: vec![dataset_input(dataset)?, codecs_input(codecs_dir)?],
    };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let codecs = Codecs::load(codecs_dir)?;
    let episodes = tokenize(&read_episodes(dataset)?, &codecs)?;
    let builder = SequenceBuilder::new(codecs.vocab.clone(), cfg.model.max_seq_len);
    let data = pack_stage_one(strategy, &episodes, &builder, &cfg.pack())?;
    let init = ModelParams::init(cfg.model.config(codecs.vocab.total_size()), seed)?;
    let b = cfg.posttrain;
    let tc =
        TrainConfig { steps: b.steps, batch_size: b.batch_size, lr0: b.lr0, seed, ..TrainConfig::posttrain(strategy) };
    let (params, log) = run_stage(init, &data, &codecs.vocab, &tc, progress("posttrain"))?;
    let (c, m, p) = write_training_outputs(&dir, STAGE_ONE_CHECKPOINT, &params, &log, cfg.ablation.loss_window)?;
    plan.finish(&dir, id, vec![c], vec![m], vec![p])
}

pub struct FinetuneArgs<'a> {
    pub dataset: &'a Path,
    pub codecs: &'a Path,
    pub init: Option<&'a Path>,
    pub seed: u64,
    pub data_fraction: f64,
}

pub fn finetune(cfg: &RunConfig, a: &FinetuneArgs<'_>, out: &Path) -> Result<Outcome> {
    if !(a.data_fraction > 0.0 && a.data_fraction <= 1.0) {
        return Err(CliError::Usage(format!("data fraction {} outside (0, 1]", a.data_fraction)));
    }
    let mut inputs = vec![dataset_input(a.dataset)?, codecs_input(a.codecs)?];
    if let Some(p) = a.init {
        inputs.push(checkpoint_input(p)?);
    }
    let plan = Plan {
        command: "finetune",
        args: json!({ "seed": a.seed, "data_fraction": a.data_fraction, "init": a.init.is_some() }),
        config: cfg,
        inputs,
    };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let codecs = Codecs::load(a.codecs)?;
    let episodes = tokenize(&read_episodes(a.dataset)?, &codecs)?;
    let keep = subset_indices(episodes.len(), a.data_fraction, a.seed)?;
    let subset: Vec<TokenizedEpisode> = keep.iter().map(|&i| episodes[i].clone()).collect();
    let builder = SequenceBuilder::new(codecs.vocab.clone(), cfg.model.max_seq_len);
    let data = pack_actions(Strategy::Policy, &subset, &builder, &cfg.pack())?;
    let model = cfg.model.config(codecs.vocab.total_size());
    let init = match a.init {
        Some(p) => {
            let params = load_checkpoint(p)?;
            if *params.config() != model {
                return Err(CliError::Core(tokvla_core::Error::Data {
                    path: p.to_path_buf(),
                    msg: format!("checkpoint shape {:?} does not match configured {:?}", params.config(), model),
                }));
            }
            params
        }
        None => ModelParams::init(model, a.seed)?,
    };
    let b = cfg.finetune;
    let tc =
        TrainConfig { steps: b.steps, batch_size: b.batch_size, lr0: b.lr0, seed: a.seed, ..TrainConfig::finetune() };
    let (params, log) = run_stage(init, &data, &codecs.vocab, &tc, progress("finetune"))?;
    let (c, m, p) = write_training_outputs(&dir, FINAL_CHECKPOINT, &params, &log, cfg.ablation.loss_window)?;
    let ids: String = keep.iter().map(|i| format!("{i}\n")).collect();
    dir.write("subset.txt", ids.as_bytes())?;
    let subset_file = dir.artifact("subset.txt")?;
    plan.finish(&dir, id, vec![c], vec![m], vec![p, subset_file])
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub codecs: &'a Path,
    /// Training episodes whose seeds are excluded from evaluation.
    pub dataset: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs<'_>, out: &Path) -> Result<Outcome> {
    let mut inputs = vec![checkpoint_input(a.checkpoint)?, codecs_input(a.codecs)?];
    if let Some(d) = a.dataset {
        inputs.push(dataset_input(d)?);
    }
    let plan = Plan { command: "eval", args: json!({}), config: cfg, inputs };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let codecs = Codecs::load(a.codecs)?;
    let params = load_checkpoint(a.checkpoint)?;
    let exclude: Vec<u64> = match a.dataset {
        Some(d) => read_episodes(d)?.iter().map(|e| e.seed).collect(),
        None => vec![],
    };
    let seeds = eval_seeds(cfg.eval.episodes, cfg.eval.seed, &exclude);
    let builder = SequenceBuilder::new(codecs.vocab.clone(), params.config().max_seq_len);
    let policy = Policy { params: &params, codecs: &codecs, builder: &builder };
    let rc: RolloutConfig = cfg.rollout;
    let report = evaluate(&policy, cfg.eval.task, &seeds, &rc)?;
    let summary = report.summary();
    eprint!("{summary}");
    dir.write(REPORT_FILE, report.to_tsv().as_bytes())?;
    dir.write(SUMMARY_FILE, summary.as_bytes())?;
    let outputs = vec![dir.artifact(REPORT_FILE)?, dir.artifact(SUMMARY_FILE)?];
    plan.finish(&dir, id, vec![], vec![], outputs)
}

pub fn ablate(cfg: &RunConfig, corpus: Option<&Path>, out: &Path) -> Result<Outcome> {
    let ab = cfg.ablation_config();
    ab.validate()?;
    let inputs = match corpus {
        Some(c) => vec![dataset_input(c)?],
        None => vec![],
    };
    let plan = Plan { command: "ablate", args: json!({ "corpus": corpus.is_some() }), config: cfg, inputs };
    let Some((dir, id)) = plan.open(out)? else { return Ok(Outcome::UpToDate(out.to_path_buf())) };
    let episodes = match corpus {
        Some(c) => read_episodes(c)?,
        None => {
            let (eps, _) = generate_dataset(cfg.data.episodes, &cfg.data.tasks, cfg.data.seed)?;
            write_episodes(&dir.path.join("data"), &eps)?;
            eps
        }
    };
    let codecs = Codecs::fit(&episodes, &cfg.codecs)?;
    codecs.save(&dir.path.join("codecs"))?;
    let ckpt_dir = dir.path.join("checkpoints");
    let report = ablation_suite(&episodes, &codecs, &ab, Some(&ckpt_dir), |line| eprintln!("ablate: {line}"))?;
    let summary = report.summary();
    eprint!("{summary}");
    dir.write(REPORT_FILE, report.to_tsv().as_bytes())?;
    dir.write(SUMMARY_FILE, summary.as_bytes())?;
    let means: Vec<f64> =
        ab.strategies.iter().map(|&s| report.mean_success(tokvla_core::rollout::ablation::Arm::Strategy, s)).collect();
    plot::save(&plot::bars(&means), &dir.file(SUCCESS_PLOT))?;
    let first = ab.seeds[0];
    let mut curves = Vec::new();
    for s in &ab.strategies {
        let p = ckpt_dir.join(format!("strategy-{s}-h{}-s{first}.metrics.tsv", ab.rollout.history));
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let log = text.lines().skip(1).map(MetricRecord::from_line).collect::<tokvla_core::Result<Vec<_>>>()?;
        curves.push(smoothed_action_loss(&log, ab.loss_window));
    }
    plot::save(&plot::curves(&curves), &dir.file(LOSS_PLOT))?;
    let all = files_in(&dir, "checkpoints")?;
    let (checkpoints, metrics): (Vec<Artifact>, Vec<Artifact>) =
        all.into_iter().partition(|a| a.path.extension().is_some_and(|e| e == "ckpt"));
    let mut outputs = files_in(&dir, "")?;
    outputs.extend(files_in(&dir, "codecs")?);
    if corpus.is_none() {
        outputs.extend(files_in(&dir, "data")?);
    }
    plan.finish(&dir, id, checkpoints, metrics, outputs)
}
