//! Closed-loop evaluation: observe, tokenize, generate an action chunk,
//! decode it and execute it in the environment.

pub mod ablation;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action_codec::ActionChunk;
use crate::codecs::{chunk_command, Codecs};
use crate::env::{random_action, render_rgb8, reset, scripted_expert, EnvAction, EnvState, TaskSpec, MAX_STEPS};
use crate::error::{ensure, Error, Result};
use crate::model::{generate_until, Decoding, ModelParams};
use crate::sequence::{HistoryConfig, PolicyStep, SequenceBuilder};
use crate::vocab::{TokenId, EOA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Past steps kept in the prompt besides the current one.
    pub history: usize,
    /// Environment steps between retained history steps. A past decision
    /// is retained only if it was taken exactly that many steps earlier.
    pub history_stride: usize,
    /// Actions executed from each generated chunk before replanning; the
    /// whole chunk when unset.
    #[serde(default)]
    pub execute: Option<usize>,
    pub max_steps: usize,
    /// Sample from the top `k` logits instead of decoding greedily.
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { history: 1, history_stride: 10, execute: None, max_steps: MAX_STEPS, top_k: None }
    }
}

impl RolloutConfig {
    fn validate(&self) -> Result<()> {
        ensure!(self.execute != Some(0), "must execute at least one action per chunk");
        ensure!(self.history_stride >= 1, "history stride must be at least 1");
        ensure!(self.max_steps >= 1, "max steps must be at least 1");
        Ok(())
    }
}

/// Decisions so far, each tagged with the environment step it was taken at.
#[derive(Default)]
struct History {
    steps: Vec<PolicyStep>,
    at: Vec<usize>,
}

impl History {
    /// The current decision plus past ones `j * stride` steps earlier,
    /// oldest first.
    fn window(&self, history: usize, stride: usize) -> Vec<PolicyStep> {
        let cur = *self.at.last().expect("current step");
        let mut out: Vec<PolicyStep> = (1..=history)
            .rev()
            .filter_map(|j| cur.checked_sub(j * stride))
            .filter_map(|t| self.at.iter().position(|&a| a == t))
            .map(|i| self.steps[i].clone())
            .collect();
        out.push(self.steps.last().expect("current step").clone());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Timeout,
    Malformed,
    BudgetExceeded,
}

impl Outcome {
    pub fn tag(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Timeout => "timeout",
            Outcome::Malformed => "malformed",
            Outcome::BudgetExceeded => "budget",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub outcome: Outcome,
    /// Environment steps executed.
    pub steps: usize,
    /// Action chunks generated.
    pub decisions: usize,
    /// Chunks whose coefficient count had to be repaired.
    pub repaired: usize,
}

impl EpisodeLog {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

/// Everything observed and done during one model-driven episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub log: EpisodeLog,
    /// Observation tokens fed to the model at each decision.
    pub observations: Vec<Vec<TokenId>>,
    /// Pose at each decision; decoded rows are displacements from it.
    pub poses: Vec<[f32; 2]>,
    /// Generated action tokens of each decision, stop token removed.
    pub generated: Vec<Vec<TokenId>>,
    pub executed: Vec<EnvAction>,
    pub final_state: EnvState,
}

/// A trained policy together with its tokenizers.
pub struct Policy<'a> {
    pub params: &'a ModelParams<f32>,
    pub codecs: &'a Codecs,
    pub builder: &'a SequenceBuilder,
}

enum Block {
    Chunk(Vec<TokenId>, ActionChunk, usize),
    Malformed(Vec<TokenId>),
}

impl Policy<'_> {
    /// Generates one action block after `prompt`. Generation stops at `EOA`,
    /// at any non-action token, or once the tokens decode to a full chunk.
    /// A block containing a non-action token is malformed; a coefficient
    /// count that misses the chunk size is repaired and counted.
    fn act(&self, prompt: &[TokenId], decoding: Decoding) -> Result<Block> {
        let codec = &self.codecs.action;
        let vocab = &self.codecs.vocab;
        let want = codec.horizon * codec.dim;
        let gen = generate_until(self.params, prompt, codec.max_tokens(), decoding, |toks| {
            codec.decoded_len(toks, vocab).map_or(true, |n| n >= want)
        })?;
        let mut toks = gen.tokens;
        if toks.last() == Some(&EOA) {
            toks.pop();
        }
        match codec.decode_lenient(&toks, vocab) {
            Ok((c, repaired)) => Ok(Block::Chunk(toks, c, repaired)),
            Err(_) => Ok(Block::Malformed(toks)),
        }
    }

    pub fn rollout(&self, task: TaskSpec, seed: u64, cfg: &RolloutConfig) -> Result<Trajectory> {
        cfg.validate()?;
        let (mut state, instruction) = reset(task, seed);
        let instr = self.codecs.encode_instruction(&instruction)?;
        let mut hist = History::default();
        let mut traj = Trajectory {
            log: EpisodeLog { seed, outcome: Outcome::Timeout, steps: 0, decisions: 0, repaired: 0 },
            observations: Vec::new(),
            poses: Vec::new(),
            generated: Vec::new(),
            executed: Vec::new(),
            final_state: state.clone(),
        };
        let finish = |mut traj: Trajectory, state: EnvState, outcome: Outcome| {
            traj.log.outcome = outcome;
            traj.log.steps = traj.executed.len();
            traj.final_state = state;
            traj
        };
        while !state.is_success() && traj.executed.len() < cfg.max_steps && !state.is_done() {
            let obs = self.codecs.encode_frame(&render_rgb8(&state))?;
            traj.observations.push(obs.clone());
            traj.poses.push(state.agent);
            hist.steps.push(PolicyStep { views: vec![obs], actions: Vec::new() });
            hist.at.push(traj.executed.len());
            let window = hist.window(cfg.history, cfg.history_stride);
            let prompt = self.builder.policy_prompt(&instr, &window, HistoryConfig::new(window.len() - 1, 1))?;
            let decoding = match cfg.top_k {
                Some(k) => Decoding::TopK { k, seed: seed ^ (traj.log.decisions as u64).wrapping_mul(0x9e37_79b9) },
                None => Decoding::Greedy,
            };
            traj.log.decisions += 1;
            let block = match self.act(&prompt, decoding) {
                Ok(b) => b,
                Err(Error::BudgetExceeded { .. }) => return Ok(finish(traj, state, Outcome::BudgetExceeded)),
                Err(e) => return Err(e),
            };
            let (toks, chunk) = match block {
                Block::Chunk(t, c, r) => {
                    traj.log.repaired += usize::from(r > 0);
                    (t, c)
                }
                Block::Malformed(t) => {
                    traj.generated.push(t);
                    return Ok(finish(traj, state, Outcome::Malformed));
                }
            };
            let origin = state.agent;
            for k in 0..chunk.horizon().min(cfg.execute.unwrap_or(usize::MAX)) {
                if state.is_done() || traj.executed.len() >= cfg.max_steps {
                    break;
                }
                let a = chunk_command(origin, state.agent, chunk.row(k));
                state = state.step(a)?.0;
                traj.executed.push(a);
            }
            traj.generated.push(toks.clone());
            hist.steps.last_mut().expect("current step").actions = toks;
        }
        let outcome = if state.is_success() { Outcome::Success } else { Outcome::Timeout };
        Ok(finish(traj, state, outcome))
    }
}

/// Runs an action source until success or the step limit.
pub fn run_controller(
    task: TaskSpec,
    seed: u64,
    max_steps: usize,
    mut act: impl FnMut(&EnvState) -> EnvAction,
) -> Result<EpisodeLog> {
    let (mut s, _) = reset(task, seed);
    let mut n = 0;
    while !s.is_done() && n < max_steps {
        s = s.step(act(&s))?.0;
        n += 1;
    }
    let outcome = if s.is_success() { Outcome::Success } else { Outcome::Timeout };
    Ok(EpisodeLog { seed, outcome, steps: n, decisions: n, repaired: 0 })
}

pub fn expert_episode(task: TaskSpec, seed: u64) -> Result<EpisodeLog> {
    run_controller(task, seed, MAX_STEPS, scripted_expert)
}

pub fn random_episode(task: TaskSpec, seed: u64) -> Result<EpisodeLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a);
    run_controller(task, seed, MAX_STEPS, |_| random_action(&mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: TaskSpec,
    pub episodes: Vec<EpisodeLog>,
}

impl EvalReport {
    pub fn n(&self) -> usize {
        self.episodes.len()
    }

    pub fn success_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.success()).count() as f64 / self.n().max(1) as f64
    }

    pub fn malformed(&self) -> usize {
        self.episodes.iter().filter(|e| e.outcome == Outcome::Malformed).count()
    }

    /// Chunks decoded with a repaired coefficient count, over all decisions.
    pub fn repaired_fraction(&self) -> f64 {
        let d: usize = self.episodes.iter().map(|e| e.decisions).sum();
        self.episodes.iter().map(|e| e.repaired).sum::<usize>() as f64 / d.max(1) as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.episodes.iter().map(|e| e.steps as f64).sum::<f64>() / self.n().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\ttask\toutcome\tsteps\tdecisions\trepaired\n");
        for e in &self.episodes {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.seed,
                self.task,
                e.outcome.tag(),
                e.steps,
                e.decisions,
                e.repaired
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "task={} episodes={} success={:.3} malformed={} repaired={:.3} mean_length={:.2}\n",
            self.task,
            self.n(),
            self.success_rate(),
            self.malformed(),
            self.repaired_fraction(),
            self.mean_length()
        )
    }
}

/// `n` evaluation seeds drawn from `seed`, skipping any in `exclude` so
/// evaluation never replays a training episode.
pub fn eval_seeds(n: usize, seed: u64, exclude: &[u64]) -> Vec<u64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0000_0000_0001);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.random::<u64>();
        if !exclude.contains(&s) && !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Evaluates `run` on every seed in parallel; the log keeps seed order.
pub fn evaluate_with(
    task: TaskSpec,
    seeds: &[u64],
    run: impl Fn(TaskSpec, u64) -> Result<EpisodeLog> + Sync,
) -> Result<EvalReport> {
    ensure!(!seeds.is_empty(), "evaluation needs at least one episode");
    let episodes = seeds.par_iter().map(|&s| run(task, s)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { task, episodes })
}

pub fn evaluate(policy: &Policy<'_>, task: TaskSpec, seeds: &[u64], cfg: &RolloutConfig) -> Result<EvalReport> {
    evaluate_with(task, seeds, |t, s| Ok(policy.rollout(t, s, cfg)?.log))
}
