//! Interleaved multimodal sequences with per-task loss masks.
//!
//! Layouts (brackets are special tokens):
//!
//! | strategy     | layout                                        | supervised            |
//! |--------------|-----------------------------------------------|-----------------------|
//! | world model  | `BOS T [BOI V1 EOI] .. [BOI Vt EOI] EOS`      | vision of frames 2..t |
//! | video        | `BOS [BOI V1 EOI] .. [BOI Vt EOI] EOS`        | vision of frames 2..t |
//! | text-to-image| `BOS T [BOI V EOI] EOS`                       | vision                |
//! | action pred  | `BOS T [BOI V EOI] [BOA A EOA] EOS`           | action                |
//! | policy       | `BOS T ([BOI V EOI]+ [BOA A EOA])* EOS`       | last action block     |
//!
//! The mask marks target positions: `mask[p]` means `ids[p]` is predicted
//! from the prefix `ids[..p]`. Brackets, BOS/EOS and text are never targets.

use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};
use crate::vocab::{Modality, TokenId, Vocabulary, BOA, BOI, BOS, EOA, EOI, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub spans: Vec<Span>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn push(&mut self, id: TokenId) {
        self.ids.push(id);
        self.mask.push(false);
    }

    fn push_block(&mut self, modality: Modality, tokens: &[TokenId], timestep: usize, supervised: bool) {
        let start = self.ids.len();
        self.ids.extend_from_slice(tokens);
        self.mask.extend(std::iter::repeat_n(supervised, tokens.len()));
        self.spans.push(Span { modality, start, end: self.ids.len(), timestep });
    }

    fn push_bracketed(
        &mut self,
        open: TokenId,
        close: TokenId,
        modality: Modality,
        tokens: &[TokenId],
        timestep: usize,
        supervised: bool,
    ) {
        self.push(open);
        self.push_block(modality, tokens, timestep, supervised);
        self.push(close);
    }
}

/// Current step plus `history` past steps spaced `stride` steps apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryConfig {
    pub history: usize,
    pub stride: usize,
}

impl HistoryConfig {
    pub const NONE: HistoryConfig = HistoryConfig { history: 0, stride: 1 };

    pub fn new(history: usize, stride: usize) -> Self {
        Self { history, stride }
    }

    /// Indices into a trajectory of `len` steps that a window ending at the
    /// last step retains, oldest first. Past steps before the start are skipped.
    pub fn retained(&self, len: usize) -> Vec<usize> {
        if len == 0 {
            return Vec::new();
        }
        let cur = len - 1;
        let mut idx: Vec<usize> = (1..=self.history).rev().filter_map(|j| cur.checked_sub(j * self.stride)).collect();
        idx.push(cur);
        idx
    }
}

/// One interleaved step: one token grid per camera view, then the action block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyStep {
    pub views: Vec<Vec<TokenId>>,
    pub actions: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct SequenceBuilder {
    vocab: Vocabulary,
    max_len: usize,
    /// Supervise every retained action block instead of only the last.
    pub mask_history_actions: bool,
    /// Also supervise vision tokens of every retained frame after the first.
    pub supervise_vision: bool,
}

impl SequenceBuilder {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        Self { vocab, max_len, mask_history_actions: false, supervise_vision: false }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn check(&self, tokens: &[TokenId], want: Modality, what: &str) -> Result<()> {
        for &t in tokens {
            let m = self.vocab.classify(t)?;
            ensure!(m == want, "{what} token {t} is {m}, expected {want}");
        }
        Ok(())
    }

    fn check_instr(&self, instr: &[TokenId]) -> Result<()> {
        ensure!(!instr.is_empty(), "instruction must not be empty");
        self.check(instr, Modality::Text, "instruction")
    }

    fn finish(&self, mut seq: TokenSequence) -> Result<TokenSequence> {
        seq.push(EOS);
        ensure!(
            seq.len() <= self.max_len,
            "packed sequence of {} tokens exceeds max length {}",
            seq.len(),
            self.max_len
        );
        Ok(seq)
    }

    fn start(&self, instr: Option<&[TokenId]>) -> TokenSequence {
        let mut seq = TokenSequence::default();
        seq.push(BOS);
        if let Some(instr) = instr {
            seq.push_block(Modality::Text, instr, 0, false);
        }
        seq
    }

    fn frames(&self, instr: Option<&[TokenId]>, frames: &[Vec<TokenId>]) -> Result<TokenSequence> {
        ensure!(frames.len() >= 2, "need at least 2 frames, got {}", frames.len());
        for f in frames {
            self.check(f, Modality::Vision, "frame")?;
        }
        let mut seq = self.start(instr);
        for (t, f) in frames.iter().enumerate() {
            seq.push_bracketed(BOI, EOI, Modality::Vision, f, t, t > 0);
        }
        self.finish(seq)
    }

    /// Instruction, then frames; predicts every frame after the first.
    pub fn world_model(&self, instr: &[TokenId], frames: &[Vec<TokenId>]) -> Result<TokenSequence> {
        self.check_instr(instr)?;
        self.frames(Some(instr), frames)
    }

    /// Frames only; predicts every frame after the first.
    pub fn video(&self, frames: &[Vec<TokenId>]) -> Result<TokenSequence> {
        self.frames(None, frames)
    }

    pub fn text_to_image(&self, instr: &[TokenId], frame: &[TokenId]) -> Result<TokenSequence> {
        self.check_instr(instr)?;
        ensure!(!frame.is_empty(), "frame must not be empty");
        self.check(frame, Modality::Vision, "frame")?;
        let mut seq = self.start(Some(instr));
        seq.push_bracketed(BOI, EOI, Modality::Vision, frame, 0, true);
        self.finish(seq)
    }

    pub fn action_prediction(
        &self,
        instr: &[TokenId],
        frame: &[TokenId],
        actions: &[TokenId],
    ) -> Result<TokenSequence> {
        self.check_instr(instr)?;
        ensure!(!frame.is_empty(), "action prediction needs an observation frame");
        ensure!(!actions.is_empty(), "action block must not be empty");
        self.check(frame, Modality::Vision, "frame")?;
        self.check(actions, Modality::Action, "action")?;
        let mut seq = self.start(Some(instr));
        seq.push_bracketed(BOI, EOI, Modality::Vision, frame, 0, false);
        seq.push_bracketed(BOA, EOA, Modality::Action, actions, 0, true);
        self.finish(seq)
    }

    fn policy_body(&self, instr: &[TokenId], retained: &[&PolicyStep]) -> Result<TokenSequence> {
        self.check_instr(instr)?;
        ensure!(!retained.is_empty(), "policy sequence needs at least one step");
        for step in retained {
            ensure!(!step.views.is_empty(), "policy step without any camera view");
            for v in &step.views {
                ensure!(!v.is_empty(), "empty camera view");
                self.check(v, Modality::Vision, "frame")?;
            }
            self.check(&step.actions, Modality::Action, "action")?;
        }
        let mut seq = self.start(Some(instr));
        let last = retained.len() - 1;
        for (t, step) in retained.iter().enumerate() {
            for v in &step.views {
                seq.push_bracketed(BOI, EOI, Modality::Vision, v, t, self.supervise_vision && t > 0);
            }
            if t < last || !step.actions.is_empty() {
                let supervised = t == last || self.mask_history_actions;
                seq.push_bracketed(BOA, EOA, Modality::Action, &step.actions, t, supervised);
            }
        }
        Ok(seq)
    }

    /// Full interleaved policy sequence over the steps retained by `history`.
    /// `steps` is the trajectory so far; its last entry is the current step.
    pub fn policy(&self, instr: &[TokenId], steps: &[PolicyStep], history: HistoryConfig) -> Result<TokenSequence> {
        ensure!(!steps.is_empty(), "policy sequence needs at least one step");
        ensure!(history.history == 0 || history.stride >= 1, "history stride must be at least 1");
        ensure!(!steps.last().unwrap().actions.is_empty(), "current step has no action tokens");
        let retained: Vec<&PolicyStep> = history.retained(steps.len()).into_iter().map(|i| &steps[i]).collect();
        let seq = self.policy_body(instr, &retained)?;
        self.finish(seq)
    }

    /// Generation prompt: the policy layout truncated right after the final
    /// `BOA`. The current step's action tokens are ignored.
    pub fn policy_prompt(
        &self,
        instr: &[TokenId],
        steps: &[PolicyStep],
        history: HistoryConfig,
    ) -> Result<Vec<TokenId>> {
        ensure!(!steps.is_empty(), "policy prompt needs at least one step");
        let idx = history.retained(steps.len());
        let mut retained: Vec<PolicyStep> = idx.iter().map(|&i| steps[i].clone()).collect();
        retained.last_mut().unwrap().actions.clear();
        let refs: Vec<&PolicyStep> = retained.iter().collect();
        let mut seq = self.policy_body(instr, &refs)?;
        seq.push(BOA);
        ensure!(seq.len() <= self.max_len, "prompt of {} tokens exceeds max length {}", seq.len(), self.max_len);
        Ok(seq.ids)
    }
}

const SHARD_MAGIC: &[u8; 4] = b"TSEQ";
const SHARD_VERSION: u32 = 1;

/// Binary shard: `magic, version, count`, then per sequence a u32 length,
/// the little-endian u32 ids and the LSB-first bit-packed mask.
pub fn write_shard(mut w: impl Write, seqs: &[TokenSequence]) -> std::io::Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    w.write_all(&(seqs.len() as u32).to_le_bytes())?;
    for s in seqs {
        w.write_all(&(s.ids.len() as u32).to_le_bytes())?;
        for id in &s.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        let mut bits = vec![0u8; s.mask.len().div_ceil(8)];
        for (i, &m) in s.mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
    }
    Ok(())
}

pub fn read_shard(mut r: impl Read) -> Result<Vec<(Vec<TokenId>, Vec<bool>)>> {
    fn word(r: &mut impl Read) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::corrupt(format!("shard truncated: {e}")))?;
        Ok(u32::from_le_bytes(b))
    }
    let magic = word(&mut r)?.to_le_bytes();
    if &magic != SHARD_MAGIC {
        return Err(Error::corrupt("shard magic mismatch"));
    }
    let version = word(&mut r)?;
    if version != SHARD_VERSION {
        return Err(Error::corrupt(format!("unsupported shard version {version}")));
    }
    let count = word(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = word(&mut r)? as usize;
        let ids = (0..len).map(|_| word(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut bits = vec![0u8; len.div_ceil(8)];
        r.read_exact(&mut bits).map_err(|e| Error::corrupt(format!("shard truncated: {e}")))?;
        let mask = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        out.push((ids, mask));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(10, 50, 40).unwrap()
    }

    fn builder() -> SequenceBuilder {
        SequenceBuilder::new(vocab(), 4096)
    }

    fn text(n: usize) -> Vec<TokenId> {
        let v = vocab();
        (0..n).map(|i| v.text_id(i % 10).unwrap()).collect()
    }

    fn frame(n: usize, seed: usize) -> Vec<TokenId> {
        let v = vocab();
        (0..n).map(|i| v.vision_id((i * 7 + seed) % 50).unwrap()).collect()
    }

    fn actions(n: usize, seed: usize) -> Vec<TokenId> {
        let v = vocab();
        (0..n).map(|i| v.action_id((i * 3 + seed) % 40).unwrap()).collect()
    }

    /// Marks tokens strictly inside each bracket pair that is supervised.
    fn bracket_mask(ids: &[TokenId], open: TokenId, close: TokenId, skip_first: usize, only_last: bool) -> Vec<bool> {
        let mut pairs = Vec::new();
        let mut start = None;
        for (i, &t) in ids.iter().enumerate() {
            if t == open {
                start = Some(i);
            } else if t == close {
                pairs.push((start.take().unwrap(), i));
            }
        }
        let mut mask = vec![false; ids.len()];
        let chosen: Vec<_> = if only_last {
            pairs.last().copied().into_iter().collect()
        } else {
            pairs.into_iter().skip(skip_first).collect()
        };
        for (s, e) in chosen {
            for m in &mut mask[s + 1..e] {
                *m = true;
            }
        }
        mask
    }

    #[test]
    fn world_model_layout() {
        let s = builder().world_model(&text(3), &[frame(16, 0), frame(16, 1)]).unwrap();
        assert_eq!(s.len(), 1 + 3 + (16 + 2) * 2 + 1);
        assert_eq!(s.mask_count(), 16);
        assert_eq!(s.mask, bracket_mask(&s.ids, BOI, EOI, 1, false));
        let frames: Vec<_> = (0..6).map(|i| frame(16, i)).collect();
        let s6 = builder().world_model(&text(3), &frames).unwrap();
        assert_eq!(s6.mask_count(), 5 * 16);
        assert!(builder().world_model(&text(3), &frames[..1]).is_err());
    }

    #[test]
    fn video_and_t2i() {
        let frames: Vec<_> = (0..3).map(|i| frame(16, i)).collect();
        let s = builder().video(&frames).unwrap();
        assert_eq!(s.mask_count(), 32);
        assert_eq!(s.mask, bracket_mask(&s.ids, BOI, EOI, 1, false));
        assert!(builder().video(&frames[..1]).is_err());

        let t = builder().text_to_image(&text(4), &frame(16, 2)).unwrap();
        assert_eq!(t.mask_count(), 16);
        assert_eq!(t.mask, bracket_mask(&t.ids, BOI, EOI, 0, false));
        assert!(builder().text_to_image(&[], &frame(16, 2)).is_err());
    }

    #[test]
    fn action_prediction_layout() {
        let s = builder().action_prediction(&text(3), &frame(16, 0), &actions(9, 1)).unwrap();
        assert_eq!(s.mask_count(), 9);
        assert_eq!(s.mask, bracket_mask(&s.ids, BOA, EOA, 0, false));
        assert!(builder().action_prediction(&text(3), &[], &actions(9, 1)).is_err());
    }

    fn steps(n: usize, act_len: usize) -> Vec<PolicyStep> {
        (0..n).map(|i| PolicyStep { views: vec![frame(16, i)], actions: actions(act_len, i) }).collect()
    }

    #[test]
    fn policy_history_window() {
        let traj = steps(25, 12);
        let s = builder().policy(&text(5), &traj, HistoryConfig::new(1, 10)).unwrap();
        assert_eq!(s.mask_count(), 12);
        assert_eq!(s.mask, bracket_mask(&s.ids, BOA, EOA, 0, true));
        assert_eq!(s.spans.iter().filter(|sp| sp.modality == Modality::Vision).count(), 2);
        // Retained steps are 14 and 24.
        let first_frame = &s.ids[s.spans[1].start..s.spans[1].end];
        assert_eq!(first_frame, traj[14].views[0].as_slice());

        let single = builder().policy(&text(5), &traj, HistoryConfig::NONE).unwrap();
        assert_eq!(single.spans.len(), 3);
        assert_eq!(single.mask_count(), 12);
    }

    #[test]
    fn policy_alternates_vision_and_action() {
        let s = builder().policy(&text(2), &steps(30, 5), HistoryConfig::new(2, 10)).unwrap();
        let order: Vec<Modality> = s.spans.iter().map(|sp| sp.modality).collect();
        assert_eq!(
            order,
            [
                Modality::Text,
                Modality::Vision,
                Modality::Action,
                Modality::Vision,
                Modality::Action,
                Modality::Vision,
                Modality::Action
            ]
        );
    }

    #[test]
    fn policy_errors() {
        let b = builder();
        assert!(b.policy(&text(2), &[], HistoryConfig::NONE).is_err());
        let mut bad = steps(1, 3);
        bad[0].actions[1] = vocab().vision_id(0).unwrap();
        assert!(b.policy(&text(2), &bad, HistoryConfig::NONE).is_err());
    }

    #[test]
    fn history_masking_flag_and_vision_supervision() {
        let mut b = builder();
        b.mask_history_actions = true;
        let s = b.policy(&text(2), &steps(11, 4), HistoryConfig::new(1, 10)).unwrap();
        assert_eq!(s.mask_count(), 8);
        b.mask_history_actions = false;
        b.supervise_vision = true;
        let s = b.policy(&text(2), &steps(11, 4), HistoryConfig::new(1, 10)).unwrap();
        assert_eq!(s.mask_count(), 4 + 16);
    }

    #[test]
    fn multi_view_steps() {
        let step = PolicyStep { views: vec![frame(16, 0), frame(4, 1)], actions: actions(3, 0) };
        let s = builder().policy(&text(2), &[step], HistoryConfig::NONE).unwrap();
        assert_eq!(s.ids.iter().filter(|&&t| t == BOI).count(), 2);
        assert!(s.spans.iter().filter(|sp| sp.modality == Modality::Vision).all(|sp| sp.timestep == 0));
    }

    #[test]
    fn prompt_ends_with_boa() {
        let traj = steps(12, 6);
        let p = builder().policy_prompt(&text(3), &traj, HistoryConfig::new(1, 10)).unwrap();
        let full = builder().policy(&text(3), &traj, HistoryConfig::new(1, 10)).unwrap();
        assert_eq!(*p.last().unwrap(), BOA);
        assert_eq!(p.as_slice(), &full.ids[..p.len()]);
    }

    #[test]
    fn max_len_is_a_hard_error() {
        let b = SequenceBuilder::new(vocab(), 20);
        assert!(b.world_model(&text(3), &[frame(16, 0), frame(16, 1)]).is_err());
    }

    #[test]
    fn shard_round_trip() {
        let a = builder().world_model(&text(3), &[frame(5, 0), frame(5, 1)]).unwrap();
        let b = builder().action_prediction(&text(1), &frame(3, 0), &actions(2, 0)).unwrap();
        let mut buf = Vec::new();
        write_shard(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let back = read_shard(buf.as_slice()).unwrap();
        assert_eq!(back, vec![(a.ids, a.mask), (b.ids, b.mask)]);
        assert!(read_shard(&buf[..buf.len() - 1]).is_err());
    }
}
