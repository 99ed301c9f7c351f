//! Ablation suite: post-training strategies compared under identical
//! fine-tuning, plus data-fraction, convergence, joint-vision and history
//! arms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_seeds, evaluate, Policy, RolloutConfig};
use crate::codecs::Codecs;
use crate::env::{Episode, TaskSpec};
use crate::error::{ensure, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::sequence::SequenceBuilder;
use crate::train::{
    checkpoint_digest, metrics_to_text, pack_actions, pack_stage_one, run_stage, save_checkpoint, smoothed_action_loss,
    steps_to_threshold, subset_indices, tokenize_episode, MetricRecord, PackConfig, Strategy, TokenizedEpisode,
    TrainConfig,
};

/// Model shape without the vocabulary, which comes from the fitted codecs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_seq_len: 512, dropout: 0.1 }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }
}

/// Optimizer budget of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, lr0: 3e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub model: ModelShape,
    pub posttrain: Budget,
    pub finetune: Budget,
    pub pack: PackConfig,
    pub rollout: RolloutConfig,
    pub task: TaskSpec,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Post-trained strategy compared against `none` in the extra arms.
    pub reference: Strategy,
    /// Fraction of episodes in the reduced-data arm; `None` skips it.
    pub data_fraction: Option<f64>,
    /// Fine-tuning steps of the reduced-data arm.
    pub data_steps: usize,
    /// Vision and action weights of the joint fine-tuning arm; `None` skips it.
    pub joint_weights: Option<(f64, f64)>,
    /// Strategy whose fine-tuning is repeated for each history length.
    pub history_strategy: Strategy,
    pub history_sweep: Vec<usize>,
    /// Moving-average window for loss thresholds.
    pub loss_window: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::STAGE_ONE.to_vec(),
            seeds: vec![0, 1, 2],
            model: ModelShape::default(),
            posttrain: Budget { steps: 3000, batch_size: 16, lr0: 3e-3 },
            finetune: Budget { steps: 5000, batch_size: 16, lr0: 3e-3 },
            pack: PackConfig::default(),
            rollout: RolloutConfig::default(),
            task: TaskSpec::Single,
            eval_episodes: 100,
            eval_seed: 99,
            reference: Strategy::WorldModel,
            data_fraction: Some(0.1),
            data_steps: 2000,
            joint_weights: Some((0.5, 1.0)),
            history_strategy: Strategy::None,
            history_sweep: vec![0, 1, 2],
            loss_window: 50,
        }
    }
}

/// Comma-separated strategy tags. `policy` is not a post-training strategy.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    let out = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse::<Strategy>)
        .collect::<Result<Vec<_>>>()?;
    ensure!(!out.is_empty(), "no strategies given");
    Ok(out)
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.strategies.is_empty(), "no strategies given");
        ensure!(!self.seeds.is_empty(), "no seeds given");
        for (i, s) in self.strategies.iter().enumerate() {
            if *s == Strategy::Policy {
                return Err(Error::invalid("policy is not a post-training strategy"));
            }
            ensure!(!self.strategies[..i].contains(s), "strategy {s} listed twice");
        }
        ensure!(self.eval_episodes >= 1, "evaluation needs at least one episode");
        ensure!(self.loss_window >= 1, "loss window must be at least 1");
        if let Some(f) = self.data_fraction {
            ensure!(f > 0.0 && f <= 1.0, "data fraction {f} outside (0, 1]");
            ensure!(self.data_steps >= 1, "data arm needs at least one step");
        }
        if !self.history_sweep.is_empty() {
            ensure!(
                self.strategies.contains(&self.history_strategy),
                "history sweep needs strategy {} in the list",
                self.history_strategy
            );
        }
        if self.data_fraction.is_some() || self.joint_weights.is_some() {
            ensure!(
                self.strategies.contains(&self.reference) && self.strategies.contains(&Strategy::None),
                "extra arms need both none and the reference strategy {}",
                self.reference
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// One post-training strategy, full data, default history.
    Strategy,
    /// Reduced fine-tuning data.
    Data,
    /// Fine-tuning also supervises vision tokens.
    Joint,
    /// History length sweep.
    History,
}

impl Arm {
    pub fn tag(self) -> &'static str {
        match self {
            Arm::Strategy => "strategy",
            Arm::Data => "data",
            Arm::Joint => "joint",
            Arm::History => "history",
        }
    }
}

/// One fine-tuned and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    pub strategy: Strategy,
    pub seed: u64,
    pub data_fraction: f64,
    pub history: usize,
    pub w_v: f64,
    pub finetune_steps: usize,
    pub success: f64,
    pub malformed: usize,
    pub repaired: f64,
    pub mean_length: f64,
    /// Smoothed action loss at the end of fine-tuning.
    pub final_loss: f64,
    /// First step whose smoothed action loss reaches the convergence
    /// threshold, if it does.
    pub convergence_step: Option<usize>,
    pub checkpoint: String,
}

impl ArmRow {
    pub const HEADER: &'static str = "arm\tstrategy\tseed\tdata_fraction\thistory\tw_v\tfinetune_steps\tsuccess\tmalformed\trepaired\tmean_length\tfinal_loss\tconvergence_step\tcheckpoint";

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\t{:.4}\t{:.2}\t{:.6}\t{}\t{}",
            self.arm.tag(),
            self.strategy,
            self.seed,
            self.data_fraction,
            self.history,
            self.w_v,
            self.finetune_steps,
            self.success,
            self.malformed,
            self.repaired,
            self.mean_length,
            self.final_loss,
            self.convergence_step.map_or_else(|| "-".to_string(), |s| s.to_string()),
            self.checkpoint,
        )
    }
}

/// Outcome of one directional comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ArmRow>,
    /// Action-loss threshold for convergence: median final loss of `none`.
    pub threshold: Option<f64>,
    pub reference: Strategy,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

impl AblationReport {
    pub fn select(&self, arm: Arm, strategy: Strategy) -> Vec<&ArmRow> {
        self.rows.iter().filter(|r| r.arm == arm && r.strategy == strategy).collect()
    }

    pub fn mean_success(&self, arm: Arm, strategy: Strategy) -> f64 {
        mean(&self.select(arm, strategy).iter().map(|r| r.success).collect::<Vec<_>>())
    }

    /// Per-seed success of two strategies in the same arm, paired by seed.
    pub fn paired(&self, arm: Arm, a: Strategy, b: Strategy) -> Vec<(u64, f64, f64)> {
        self.select(arm, a)
            .into_iter()
            .filter_map(|ra| {
                self.select(arm, b)
                    .into_iter()
                    .find(|rb| rb.seed == ra.seed)
                    .map(|rb| (ra.seed, ra.success, rb.success))
            })
            .collect()
    }

    pub fn history_success(&self, history: usize) -> f64 {
        mean(
            &self
                .rows
                .iter()
                .filter(|r| r.arm == Arm::History && r.history == history)
                .map(|r| r.success)
                .collect::<Vec<_>>(),
        )
    }

    /// Strategies of the main arm ordered by mean success, best first. Ties
    /// keep tag order.
    pub fn ranking(&self) -> Vec<(Strategy, f64)> {
        let mut seen: Vec<Strategy> = Vec::new();
        for r in self.rows.iter().filter(|r| r.arm == Arm::Strategy) {
            if !seen.contains(&r.strategy) {
                seen.push(r.strategy);
            }
        }
        let mut out: Vec<(Strategy, f64)> =
            seen.into_iter().map(|s| (s, self.mean_success(Arm::Strategy, s))).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// The directional comparisons, each over all seeds present.
    pub fn checks(&self) -> Vec<Check> {
        let reference = self.reference;
        let mut out = Vec::new();
        let pairs = self.paired(Arm::Strategy, reference, Strategy::None);
        if !pairs.is_empty() {
            let wins = pairs.iter().filter(|(_, a, b)| a > b).count();
            out.push(Check {
                name: "headline",
                pass: pairs.len() >= 3 && wins == pairs.len(),
                detail: format!(
                    "{reference} {:.3} vs none {:.3}, {wins}/{} seeds better",
                    mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
                    mean(&pairs.iter().map(|p| p.2).collect::<Vec<_>>()),
                    pairs.len()
                ),
            });
        }
        let pairs = self.paired(Arm::Data, reference, Strategy::None);
        if !pairs.is_empty() {
            let a = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let b = mean(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
            out.push(Check {
                name: "data_efficiency",
                pass: pairs.len() >= 3 && a > b,
                detail: format!("{reference} {a:.3} vs none {b:.3} over {} seeds", pairs.len()),
            });
        }
        if let Some(thr) = self.threshold {
            let rows = self.select(Arm::Strategy, reference);
            let fast = rows.iter().filter(|r| r.convergence_step.is_some_and(|s| 2 * s <= r.finetune_steps)).count();
            let steps: Vec<String> = rows
                .iter()
                .map(|r| r.convergence_step.map_or_else(|| "never".to_string(), |s| s.to_string()))
                .collect();
            out.push(Check {
                name: "convergence",
                pass: !rows.is_empty() && fast == rows.len(),
                detail: format!(
                    "threshold {thr:.4}; {reference} steps [{}] of {}",
                    steps.join(", "),
                    rows.first().map_or(0, |r| r.finetune_steps)
                ),
            });
        }
        let hist: Vec<usize> = {
            let mut h: Vec<usize> = self.rows.iter().filter(|r| r.arm == Arm::History).map(|r| r.history).collect();
            h.sort_unstable();
            h.dedup();
            h
        };
        if hist.contains(&0) && hist.contains(&1) {
            let (h1, h0) = (self.history_success(1), self.history_success(0));
            let seeds = self.rows.iter().filter(|r| r.arm == Arm::History && r.history == 1).count();
            out.push(Check {
                name: "history",
                pass: seeds >= 3 && h1 >= h0,
                detail: format!("1+1 {h1:.3} vs 1+0 {h0:.3} over {seeds} seeds"),
            });
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(ArmRow::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "post-training strategies (mean success over seeds, best first):");
        for (i, (st, m)) in self.ranking().iter().enumerate() {
            let per: Vec<String> =
                self.select(Arm::Strategy, *st).iter().map(|r| format!("{:.2}", r.success)).collect();
            let _ = writeln!(s, "  {}. {:<12} {:.3}  [{}]", i + 1, st.tag(), m, per.join(" "));
        }
        for (arm, label) in [(Arm::Data, "reduced data"), (Arm::Joint, "joint vision")] {
            let rows: Vec<&ArmRow> = self.rows.iter().filter(|r| r.arm == arm).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(s, "{label}:");
            for st in first_seen(rows.iter().map(|r| r.strategy)) {
                let _ = writeln!(s, "  {:<12} {:.3}", st.tag(), self.mean_success(arm, st));
            }
        }
        let hist = first_seen(self.rows.iter().filter(|r| r.arm == Arm::History).map(|r| r.history));
        if !hist.is_empty() {
            let _ = writeln!(s, "history:");
            for h in hist {
                let _ = writeln!(s, "  1+{h:<10} {:.3}", self.history_success(h));
            }
        }
        if let Some(t) = self.threshold {
            let _ = writeln!(s, "convergence threshold (median final none loss): {t:.4}");
        }
        for c in self.checks() {
            let _ = writeln!(s, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

/// Distinct items in order of first appearance.
fn first_seen<T: PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Shared state of one suite run.
struct Suite<'a> {
    cfg: &'a AblationConfig,
    codecs: &'a Codecs,
    builder: SequenceBuilder,
    episodes: Vec<TokenizedEpisode>,
    eval: Vec<u64>,
    out: Option<&'a Path>,
}

struct Finetuned {
    row: ArmRow,
    log: Vec<MetricRecord>,
}

impl Suite<'_> {
    fn model_config(&self) -> ModelConfig {
        self.cfg.model.config(self.codecs.vocab.total_size())
    }

    fn posttrain(&self, strategy: Strategy, seed: u64) -> Result<ModelParams<f32>> {
        let init = ModelParams::init(self.model_config(), seed)?;
        if strategy == Strategy::None {
            return Ok(init);
        }
        let data = pack_stage_one(strategy, &self.episodes, &self.builder, &self.cfg.pack)?;
        let b = self.cfg.posttrain;
        let tc = TrainConfig {
            steps: b.steps,
            batch_size: b.batch_size,
            lr0: b.lr0,
            seed,
            ..TrainConfig::posttrain(strategy)
        };
        let (params, log) = run_stage(init, &data, &self.codecs.vocab, &tc, |_| {})?;
        self.persist(&format!("posttrain-{strategy}-s{seed}"), &params, &log)?;
        Ok(params)
    }

    fn persist(&self, name: &str, params: &ModelParams<f32>, log: &[MetricRecord]) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(params, &dir.join(format!("{name}.ckpt")))?;
        let p = dir.join(format!("{name}.metrics.tsv"));
        fs::write(&p, metrics_to_text(log)).map_err(|e| Error::io(&p, e))
    }

    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &self,
        arm: Arm,
        strategy: Strategy,
        seed: u64,
        init: &ModelParams<f32>,
        subset: Option<(f64, &[usize])>,
        history: usize,
        weights: Option<(f64, f64)>,
    ) -> Result<Finetuned> {
        let pack = PackConfig {
            history,
            history_stride: self.cfg.rollout.history_stride,
            joint_vision: weights.is_some(),
            ..self.cfg.pack
        };
        let data = match subset {
            Some((_, idx)) => {
                let eps: Vec<TokenizedEpisode> = idx.iter().map(|&i| self.episodes[i].clone()).collect();
                pack_actions(Strategy::Policy, &eps, &self.builder, &pack)?
            }
            None => pack_actions(Strategy::Policy, &self.episodes, &self.builder, &pack)?,
        };
        let b = self.cfg.finetune;
        let steps = if subset.is_some() { self.cfg.data_steps } else { b.steps };
        let (w_v, w_a) = weights.unwrap_or((0.0, 1.0));
        let tc = TrainConfig {
            steps,
            batch_size: b.batch_size,
            lr0: b.lr0,
            seed,
            w_v,
            w_a,
            joint_vision: weights.is_some(),
            ..TrainConfig::finetune()
        };
        let (params, log) = run_stage(init.clone(), &data, &self.codecs.vocab, &tc, |_| {})?;
        let name = format!("{}-{strategy}-h{history}-s{seed}", arm.tag());
        self.persist(&name, &params, &log)?;
        let policy = Policy { params: &params, codecs: self.codecs, builder: &self.builder };
        let rc = RolloutConfig { history, ..self.cfg.rollout };
        let report = evaluate(&policy, self.cfg.task, &self.eval, &rc)?;
        let sm = smoothed_action_loss(&log, self.cfg.loss_window);
        let row = ArmRow {
            arm,
            strategy,
            seed,
            data_fraction: subset.map_or(1.0, |(f, _)| f),
            history,
            w_v,
            finetune_steps: steps,
            success: report.success_rate(),
            malformed: report.malformed(),
            repaired: report.repaired_fraction(),
            mean_length: report.mean_length(),
            final_loss: sm.last().copied().unwrap_or(f64::NAN),
            convergence_step: None,
            checkpoint: checkpoint_digest(&params),
        };
        Ok(Finetuned { row, log })
    }
}

/// Runs every arm of `cfg` on `episodes` with fitted `codecs`. Checkpoints
/// and metric logs go to `out` when given. `progress` receives one line per
/// finished run.
pub fn ablation_suite(
    episodes: &[Episode],
    codecs: &Codecs,
    cfg: &AblationConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    cfg.validate()?;
    ensure!(!episodes.is_empty(), "empty corpus");
    let tokenized = episodes.iter().map(|e| tokenize_episode(e, codecs)).collect::<Result<Vec<_>>>()?;
    let train_seeds: Vec<u64> = episodes.iter().map(|e| e.seed).collect();
    let suite = Suite {
        cfg,
        codecs,
        builder: SequenceBuilder::new(codecs.vocab.clone(), cfg.model.max_seq_len),
        episodes: tokenized,
        eval: eval_seeds(cfg.eval_episodes, cfg.eval_seed, &train_seeds),
        out,
    };
    let default_history = cfg.rollout.history;
    let mut rows: Vec<ArmRow> = Vec::new();
    let mut logs: Vec<(usize, Vec<MetricRecord>)> = Vec::new();
    for &seed in &cfg.seeds {
        let subset =
            cfg.data_fraction.map(|f| (f, subset_indices(episodes.len(), f, seed))).map(|(f, r)| r.map(|i| (f, i)));
        let subset = subset.transpose()?;
        for &strategy in &cfg.strategies {
            let post = suite.posttrain(strategy, seed)?;
            let main = suite.finetune(Arm::Strategy, strategy, seed, &post, None, default_history, None)?;
            progress(&main.row.to_line());
            logs.push((rows.len(), main.log));
            rows.push(main.row.clone());
            let is_compared = strategy == Strategy::None || strategy == cfg.reference;
            if let (true, Some((f, idx))) = (is_compared, subset.as_ref()) {
                let r = suite.finetune(Arm::Data, strategy, seed, &post, Some((*f, idx)), default_history, None)?;
                progress(&r.row.to_line());
                rows.push(r.row);
            }
            if let (Some(w), true) = (cfg.joint_weights, strategy == cfg.reference) {
                let r = suite.finetune(Arm::Joint, strategy, seed, &post, None, default_history, Some(w))?;
                progress(&r.row.to_line());
                rows.push(r.row);
            }
            if strategy != cfg.history_strategy {
                continue;
            }
            for &h in &cfg.history_sweep {
                let row = if h == default_history {
                    ArmRow { arm: Arm::History, ..main.row.clone() }
                } else {
                    let r = suite.finetune(Arm::History, strategy, seed, &post, None, h, None)?;
                    progress(&r.row.to_line());
                    r.row
                };
                rows.push(row);
            }
        }
    }
    let threshold = median(
        rows.iter().filter(|r| r.arm == Arm::Strategy && r.strategy == Strategy::None).map(|r| r.final_loss).collect(),
    );
    if let Some(thr) = threshold {
        for (i, log) in &logs {
            rows[*i].convergence_step = steps_to_threshold(log, thr, cfg.loss_window);
        }
    }
    Ok(AblationReport { rows, threshold, reference: cfg.reference })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: Arm, strategy: Strategy, seed: u64, success: f64) -> ArmRow {
        ArmRow {
            arm,
            strategy,
            seed,
            data_fraction: 1.0,
            history: 1,
            w_v: 0.0,
            finetune_steps: 100,
            success,
            malformed: 0,
            repaired: 0.0,
            mean_length: 10.0,
            final_loss: 0.5,
            convergence_step: Some(40),
            checkpoint: String::new(),
        }
    }

    #[test]
    fn unknown_strategy_tag_is_rejected() {
        assert!(matches!(parse_strategies("none,bogus"), Err(Error::InvalidArgument(_))));
        assert_eq!(parse_strategies("none, world_model").unwrap(), vec![Strategy::None, Strategy::WorldModel]);
        let cfg = AblationConfig { strategies: vec![Strategy::Policy], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        assert!(AblationConfig::default().validate().is_ok());
        let no_ref = AblationConfig { strategies: vec![Strategy::None], ..Default::default() };
        assert!(no_ref.validate().is_err());
    }

    #[test]
    fn checks_and_ranking() {
        let mut rows = Vec::new();
        for seed in 0..3 {
            rows.push(row(Arm::Strategy, Strategy::None, seed, 0.2));
            rows.push(row(Arm::Strategy, Strategy::WorldModel, seed, 0.3 + seed as f64 * 0.1));
            rows.push(row(Arm::Strategy, Strategy::Video, seed, 0.25));
        }
        let report = AblationReport { rows, threshold: Some(0.5), reference: Strategy::WorldModel };
        let rank: Vec<Strategy> = report.ranking().into_iter().map(|r| r.0).collect();
        assert_eq!(rank, vec![Strategy::WorldModel, Strategy::Video, Strategy::None]);
        let checks = report.checks();
        assert_eq!(checks.len(), 2);
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
        let mut worse = report.clone();
        worse.rows[1].success = 0.1;
        assert!(!worse.checks()[0].pass, "one losing seed fails the sign test");
        let tsv = report.to_tsv();
        assert_eq!(tsv.lines().count(), 10);
        assert!(tsv.lines().skip(1).all(|l| l.split('\t').count() == ArmRow::HEADER.split('\t').count()));
        assert!(report.summary().contains("1. world_model"));
    }

    #[test]
    fn summary_lists_each_arm_once_across_seeds() {
        let mut rows = Vec::new();
        for seed in 0..3 {
            for st in [Strategy::None, Strategy::WorldModel] {
                rows.push(row(Arm::Strategy, st, seed, 0.2));
                rows.push(ArmRow { data_fraction: 0.1, ..row(Arm::Data, st, seed, 0.1) });
            }
            for h in [0, 1, 2] {
                rows.push(ArmRow { history: h, ..row(Arm::History, Strategy::None, seed, 0.2) });
            }
        }
        let report = AblationReport { rows, threshold: None, reference: Strategy::WorldModel };
        let summary = report.summary();
        assert_eq!(summary.matches("\n  none ").count(), 1, "{summary}");
        assert_eq!(summary.matches("\n  world_model ").count(), 1, "{summary}");
        for h in 0..3 {
            assert_eq!(summary.matches(&format!("\n  1+{h} ")).count(), 1, "{summary}");
        }
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(vec![3.0, 1.0, 2.0, 4.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
