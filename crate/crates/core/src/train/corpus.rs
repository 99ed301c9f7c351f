//! Packing tokenized episodes into per-strategy training sequences.

use serde::{Deserialize, Serialize};

use crate::codecs::{action_chunk, mismatch_chunk, Codecs};
use crate::env::Episode;
use crate::error::{ensure, Result};
use crate::sequence::{HistoryConfig, PolicyStep, SequenceBuilder, TokenSequence};
use crate::vocab::TokenId;

/// Instruction and frame tokens only. Everything a post-training stage that
/// must not see actions is allowed to consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualEpisode {
    pub instruction: Vec<TokenId>,
    pub frames: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedEpisode {
    pub visual: VisualEpisode,
    /// Action tokens of the chunk starting at each step.
    pub chunks: Vec<Vec<TokenId>>,
    /// Same chunks in a foreign (permuted, sign-flipped) action space.
    pub foreign_chunks: Vec<Vec<TokenId>>,
}

impl TokenizedEpisode {
    pub fn steps(&self) -> usize {
        self.chunks.len()
    }
}

pub fn tokenize_episode(ep: &Episode, codecs: &Codecs) -> Result<TokenizedEpisode> {
    let h = codecs.horizon();
    let mut chunks = Vec::with_capacity(ep.actions.len());
    let mut foreign = Vec::with_capacity(ep.actions.len());
    let poses = ep.poses()?;
    for t in 0..ep.actions.len() {
        let c = action_chunk(&poses, &ep.actions, t, h);
        chunks.push(codecs.action.encode(&c, &codecs.vocab)?);
        foreign.push(codecs.action.encode(&mismatch_chunk(&c), &codecs.vocab)?);
    }
    Ok(TokenizedEpisode {
        visual: VisualEpisode {
            instruction: codecs.encode_instruction(&ep.instruction)?,
            frames: codecs.encode_frames(&ep.frames)?,
        },
        chunks,
        foreign_chunks: foreign,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    ActionPred,
    T2i,
    Video,
    WorldModel,
    Policy,
}

impl Strategy {
    pub const STAGE_ONE: [Strategy; 5] =
        [Strategy::None, Strategy::ActionPred, Strategy::T2i, Strategy::Video, Strategy::WorldModel];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::ActionPred => "action_pred",
            Strategy::T2i => "t2i",
            Strategy::Video => "video",
            Strategy::WorldModel => "world_model",
            Strategy::Policy => "policy",
        }
    }

    /// Whether packing reads action data at all.
    pub fn uses_actions(self) -> bool {
        matches!(self, Strategy::ActionPred | Strategy::Policy)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        [Strategy::Policy]
            .into_iter()
            .chain(Strategy::STAGE_ONE)
            .find(|st| st.tag() == s)
            .ok_or_else(|| crate::Error::invalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    /// Frames per world-model/video window.
    pub window_frames: usize,
    /// Steps between consecutive frames of a window.
    pub frame_stride: usize,
    pub history: usize,
    pub history_stride: usize,
    /// Policy samples are taken only at steps that are multiples of this,
    /// matching the points where a rollout that executes whole chunks
    /// replans. Set it to the chunk horizon.
    pub policy_stride: usize,
    /// Supervise vision of retained frames in policy sequences too.
    pub joint_vision: bool,
}

impl Default for PackConfig {
    fn default() -> Self {
        Self {
            window_frames: 6,
            frame_stride: 10,
            history: 1,
            history_stride: 10,
            policy_stride: 5,
            joint_vision: false,
        }
    }
}

impl PackConfig {
    pub fn history_config(&self) -> HistoryConfig {
        HistoryConfig::new(self.history, self.history_stride.max(1))
    }
}

fn windows(ep: &VisualEpisode, cfg: &PackConfig) -> Vec<Vec<Vec<TokenId>>> {
    let stride = cfg.frame_stride.max(1);
    (0..ep.frames.len())
        .map(|s| {
            (s..ep.frames.len())
                .step_by(stride)
                .take(cfg.window_frames)
                .map(|t| ep.frames[t].clone())
                .collect::<Vec<_>>()
        })
        .filter(|w| w.len() >= 2)
        .collect()
}

/// Action-free stage-one sequences. Takes only visual episodes, so these
/// strategies cannot read action data.
pub fn pack_visual(
    strategy: Strategy,
    episodes: &[VisualEpisode],
    builder: &SequenceBuilder,
    cfg: &PackConfig,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for ep in episodes {
        match strategy {
            Strategy::WorldModel => {
                for w in windows(ep, cfg) {
                    out.push(builder.world_model(&ep.instruction, &w)?);
                }
            }
            Strategy::Video => {
                for w in windows(ep, cfg) {
                    out.push(builder.video(&w)?);
                }
            }
            Strategy::T2i => {
                for f in &ep.frames {
                    out.push(builder.text_to_image(&ep.instruction, f)?);
                }
            }
            other => return Err(crate::Error::invalid(format!("{other} is not an action-free strategy"))),
        }
    }
    Ok(out)
}

/// Sequences that carry action tokens: foreign-space action prediction and
/// the policy itself.
pub fn pack_actions(
    strategy: Strategy,
    episodes: &[TokenizedEpisode],
    builder: &SequenceBuilder,
    cfg: &PackConfig,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    match strategy {
        Strategy::ActionPred => {
            for ep in episodes {
                for t in 0..ep.steps() {
                    out.push(builder.action_prediction(
                        &ep.visual.instruction,
                        &ep.visual.frames[t],
                        &ep.foreign_chunks[t],
                    )?);
                }
            }
        }
        Strategy::Policy => {
            let mut b = builder.clone();
            b.supervise_vision = cfg.joint_vision;
            let hist = cfg.history_config();
            for ep in episodes {
                let steps: Vec<PolicyStep> = (0..ep.steps())
                    .map(|t| PolicyStep { views: vec![ep.visual.frames[t].clone()], actions: ep.chunks[t].clone() })
                    .collect();
                for t in (0..steps.len()).step_by(cfg.policy_stride.max(1)) {
                    out.push(b.policy(&ep.visual.instruction, &steps[..=t], hist)?);
                }
            }
        }
        other => return Err(crate::Error::invalid(format!("{other} does not pack actions"))),
    }
    Ok(out)
}

/// Stage-one corpus for `strategy`; empty for `none`.
pub fn pack_stage_one(
    strategy: Strategy,
    episodes: &[TokenizedEpisode],
    builder: &SequenceBuilder,
    cfg: &PackConfig,
) -> Result<Vec<TokenSequence>> {
    match strategy {
        Strategy::None => Ok(Vec::new()),
        Strategy::ActionPred => pack_actions(strategy, episodes, builder, cfg),
        Strategy::Policy => Err(crate::Error::invalid("policy is not a post-training strategy")),
        _ => {
            let visual: Vec<VisualEpisode> = episodes.iter().map(|e| e.visual.clone()).collect();
            pack_visual(strategy, &visual, builder, cfg)
        }
    }
}

/// Seeded subset holding `fraction` of the episodes (at least one), in the
/// original order.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    ensure!(fraction > 0.0 && fraction <= 1.0, "data fraction {fraction} outside (0, 1]");
    ensure!(n > 0, "empty dataset");
    let keep = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx)
}
