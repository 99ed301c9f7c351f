//! Optimization: AdamW with a cosine schedule, the post-train/fine-tune
//! recipe, and the per-strategy corpora it consumes.

mod corpus;

pub use corpus::{
    pack_actions, pack_stage_one, pack_visual, subset_indices, tokenize_episode, PackConfig, Strategy,
    TokenizedEpisode, VisualEpisode,
};

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::model::{loss_and_grad, read_checkpoint, write_checkpoint, ModelParams, TargetSpec, TrainExample};
use crate::sequence::TokenSequence;
use crate::vocab::{Modality, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Posttrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub strategy: Strategy,
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Weight of supervised vision tokens.
    pub w_v: f64,
    /// Weight of supervised action tokens.
    pub w_a: f64,
    /// Policy sequences also supervise vision tokens.
    #[serde(default)]
    pub joint_vision: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn posttrain(strategy: Strategy) -> Self {
        Self {
            stage: Stage::Posttrain,
            strategy,
            steps: 2000,
            batch_size: 32,
            lr0: 3e-3,
            schedule: Schedule::Cosine,
            seed: 0,
            w_v: 0.5,
            w_a: 1.0,
            joint_vision: false,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }

    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, strategy: Strategy::Policy, steps: 1000, ..Self::posttrain(Strategy::Policy) }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be positive");
        ensure!(self.w_v >= 0.0 && self.w_a >= 0.0, "loss weights must be non-negative");
        ensure!(self.weight_decay >= 0.0 && self.grad_clip > 0.0, "bad optimizer settings");
        match (self.stage, self.strategy) {
            (Stage::Finetune, Strategy::Policy) => Ok(()),
            (Stage::Posttrain, Strategy::Policy | Strategy::None) | (Stage::Finetune, _) => {
                Err(Error::invalid(format!("strategy {} is not valid for stage {:?}", self.strategy, self.stage)))
            }
            (Stage::Posttrain, _) => Ok(()),
        }
    }

    fn allowed(&self) -> &'static [Modality] {
        match self.strategy {
            Strategy::WorldModel | Strategy::Video | Strategy::T2i => &[Modality::Vision],
            Strategy::ActionPred => &[Modality::Action],
            Strategy::Policy if self.joint_vision => &[Modality::Action, Modality::Vision],
            Strategy::Policy | Strategy::None => &[Modality::Action],
        }
    }

    fn weight(&self, m: Modality) -> f64 {
        match m {
            Modality::Vision => self.w_v,
            _ => self.w_a,
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    ensure!(total >= 1, "schedule length must be positive");
    ensure!(step <= total, "step {step} beyond schedule length {total}");
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub action_loss: Option<f64>,
    pub vision_loss: Option<f64>,
    pub masked: usize,
    pub grad_norm: f64,
}

impl MetricRecord {
    pub const HEADER: &'static str = "step\tlr\tloss\taction_loss\tvision_loss\tmasked\tgrad_norm";

    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{:.6e}\t{:.6}\t{}\t{}\t{}\t{:.6}",
            self.step,
            self.lr,
            self.loss,
            opt(self.action_loss),
            opt(self.vision_loss),
            self.masked,
            self.grad_norm
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        ensure!(f.len() == 7, "metric line needs 7 fields: {line:?}");
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {s:?}")));
        let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            step: num(f[0])? as usize,
            lr: num(f[1])?,
            loss: num(f[2])?,
            action_loss: opt(f[3])?,
            vision_loss: opt(f[4])?,
            masked: num(f[5])? as usize,
            grad_norm: num(f[6])?,
        })
    }
}

pub fn metrics_to_text(log: &[MetricRecord]) -> String {
    let mut s = String::from(MetricRecord::HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Converts a packed sequence into inputs and weighted targets, checking that
/// every supervised token belongs to a modality `cfg.strategy` may train on.
pub fn to_example(seq: &TokenSequence, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainExample> {
    ensure!(seq.ids.len() >= 2 && seq.ids.len() == seq.mask.len(), "malformed sequence");
    ensure!(!seq.mask[0], "position 0 cannot be a target");
    let allowed = cfg.allowed();
    let mut targets = Vec::new();
    for (p, (&id, &m)) in seq.ids.iter().zip(&seq.mask).enumerate() {
        if !m {
            continue;
        }
        let modality = vocab.classify(id)?;
        ensure!(allowed.contains(&modality), "strategy {} supervises {modality} token at position {p}", cfg.strategy);
        targets.push(TargetSpec { pos: p - 1, target: id, weight: cfg.weight(modality), modality });
    }
    ensure!(!targets.is_empty(), "sequence has no supervised tokens");
    Ok(TrainExample { inputs: seq.ids[..seq.ids.len() - 1].to_vec(), targets })
}

struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(params: &ModelParams<f32>) -> Self {
        let n = params.num_params();
        let mut decay = vec![false; n];
        for t in params.layout().tensors() {
            if t.shape.len() == 2 {
                decay[t.offset..t.offset + t.numel()].fill(true);
            }
        }
        Self { m: vec![0.0; n], v: vec![0.0; n], decay, t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, wd: f64) {
        self.t += 1;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] as f64 / c1;
            let vhat = self.v[i] as f64 / c2;
            let mut upd = mhat / (vhat.sqrt() + ADAM_EPS);
            if self.decay[i] {
                upd += wd * params[i] as f64;
            }
            params[i] -= (lr * upd) as f32;
        }
    }
}

/// Runs `cfg.steps` optimizer steps over `data`. Batches walk seeded
/// shuffles of the dataset. `on_step` sees every record as it is produced.
pub fn run_stage(
    mut params: ModelParams<f32>,
    data: &[TokenSequence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&MetricRecord),
) -> Result<(ModelParams<f32>, Vec<MetricRecord>)> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "empty training set");
    let examples = data.iter().map(|s| to_example(s, vocab, cfg)).collect::<Result<Vec<_>>>()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = AdamW::new(&params);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let lr = match cfg.schedule {
            Schedule::Cosine => cosine_lr(step, cfg.steps, cfg.lr0)?,
            Schedule::Constant => cfg.lr0,
        };
        let (report, mut grads) = loss_and_grad(&params, &batch, Some(&mut drop_rng))?;
        let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !report.loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: report.loss,
                detail: format!("lr={lr:e} grad_norm={norm} batch_targets={}", report.targets()),
            });
        }
        if norm > cfg.grad_clip {
            let s = (cfg.grad_clip / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        opt.step(params.data_mut(), &grads, lr, cfg.weight_decay);
        let rec = MetricRecord {
            step,
            lr,
            loss: report.loss,
            action_loss: report.action_loss(),
            vision_loss: report.vision_loss(),
            masked: report.targets(),
            grad_norm: norm,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok((params, log))
}

pub fn checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("writing to memory");
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn checkpoint_digest(params: &ModelParams<f32>) -> String {
    sha256_hex(&checkpoint_bytes(params))
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, &mut BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("checkpoint {}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| Error::data(path, e.to_string()))
}

pub const STAGE_ONE_CHECKPOINT: &str = "stage1.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub params: ModelParams<f32>,
    pub posttrain_log: Vec<MetricRecord>,
    pub finetune_log: Vec<MetricRecord>,
}

/// Post-train on `stage_one` (skipped when its strategy is `none`), save the
/// intermediate checkpoint, then fine-tune on `stage_two`. With `resume`
/// the stage-one checkpoint is loaded from `dir` instead of trained.
pub fn two_stage(
    init: ModelParams<f32>,
    stage_one: (&[TokenSequence], &TrainConfig),
    stage_two: (&[TokenSequence], &TrainConfig),
    vocab: &Vocabulary,
    dir: Option<&Path>,
    resume: bool,
) -> Result<TwoStageOutcome> {
    let (data1, cfg1) = stage_one;
    let (data2, cfg2) = stage_two;
    ensure!(cfg2.stage == Stage::Finetune, "second stage must be a fine-tune");
    let mut posttrain_log = Vec::new();
    let params = if cfg1.strategy == Strategy::None {
        init
    } else if resume {
        let dir = dir.ok_or_else(|| Error::invalid("resume needs a checkpoint directory"))?;
        load_checkpoint(&dir.join(STAGE_ONE_CHECKPOINT))?
    } else {
        let (p, log) = run_stage(init, data1, vocab, cfg1, |_| {})?;
        if let Some(dir) = dir {
            save_checkpoint(&p, &dir.join(STAGE_ONE_CHECKPOINT))?;
        }
        posttrain_log = log;
        p
    };
    let (params, finetune_log) = run_stage(params, data2, vocab, cfg2, |_| {})?;
    if let Some(dir) = dir {
        save_checkpoint(&params, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TwoStageOutcome { params, posttrain_log, finetune_log })
}

/// Trailing moving average of the action loss at every logged step.
pub fn smoothed_action_loss(log: &[MetricRecord], window: usize) -> Vec<f64> {
    let vals: Vec<f64> = log.iter().map(|r| r.action_loss.unwrap_or(f64::NAN)).collect();
    let w = window.max(1);
    (0..vals.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            vals[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// First step (1-based count) whose smoothed action loss is at or below
/// `threshold`.
pub fn steps_to_threshold(log: &[MetricRecord], threshold: f64, window: usize) -> Option<usize> {
    smoothed_action_loss(log, window).iter().position(|&v| v <= threshold).map(|i| i + 1)
}
