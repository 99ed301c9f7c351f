//! Shared token-ID space for text, vision and action tokens.
//!
//! Layout is fixed: the seven special tokens occupy IDs `0..7`, followed by
//! the text range, the vision range, and the action range last.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use crate::error::{ensure, Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    Boi,
    Eoi,
    Boa,
    Eoa,
}

impl Special {
    pub const ALL: [Special; 7] =
        [Special::Bos, Special::Eos, Special::Pad, Special::Boi, Special::Eoi, Special::Boa, Special::Eoa];

    pub const fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn surface(self) -> &'static str {
        match self {
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Pad => "<pad>",
            Special::Boi => "<boi>",
            Special::Eoi => "<eoi>",
            Special::Boa => "<boa>",
            Special::Eoa => "<eoa>",
        }
    }
}

pub const BOS: TokenId = Special::Bos.id();
pub const EOS: TokenId = Special::Eos.id();
pub const PAD: TokenId = Special::Pad.id();
pub const BOI: TokenId = Special::Boi.id();
pub const EOI: TokenId = Special::Eoi.id();
pub const BOA: TokenId = Special::Boa.id();
pub const EOA: TokenId = Special::Eoa.id();

const NUM_SPECIALS: u32 = Special::ALL.len() as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Vision,
    Action,
    Special,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Action => "action",
            Modality::Special => "special",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "vision" => Ok(Modality::Vision),
            "action" => Ok(Modality::Action),
            "special" => Ok(Modality::Special),
            other => Err(Error::invalid(format!("unknown modality tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    text_range: Range<TokenId>,
    vision_range: Range<TokenId>,
    action_range: Range<TokenId>,
}

impl Vocabulary {
    pub fn build(text_size: usize, vision_size: usize, action_size: usize) -> Result<Self> {
        ensure!(text_size >= 1, "text vocabulary size must be at least 1");
        ensure!(vision_size >= 1, "vision vocabulary size must be at least 1");
        ensure!(action_size >= 1, "action vocabulary size must be at least 1");
        let total = NUM_SPECIALS as u64 + text_size as u64 + vision_size as u64 + action_size as u64;
        ensure!(total <= u32::MAX as u64, "vocabulary of {total} ids does not fit in u32");

        let text_start = NUM_SPECIALS;
        let vision_start = text_start + text_size as u32;
        let action_start = vision_start + vision_size as u32;
        Ok(Self {
            text_range: text_start..vision_start,
            vision_range: vision_start..action_start,
            action_range: action_start..action_start + action_size as u32,
        })
    }

    pub fn text_range(&self) -> Range<TokenId> {
        self.text_range.clone()
    }

    pub fn vision_range(&self) -> Range<TokenId> {
        self.vision_range.clone()
    }

    pub fn action_range(&self) -> Range<TokenId> {
        self.action_range.clone()
    }

    pub fn total_size(&self) -> usize {
        self.action_range.end as usize
    }

    pub fn special(&self, s: Special) -> TokenId {
        s.id()
    }

    pub fn classify(&self, id: TokenId) -> Result<Modality> {
        if id < NUM_SPECIALS {
            Ok(Modality::Special)
        } else if self.text_range.contains(&id) {
            Ok(Modality::Text)
        } else if self.vision_range.contains(&id) {
            Ok(Modality::Vision)
        } else if self.action_range.contains(&id) {
            Ok(Modality::Action)
        } else {
            Err(Error::invalid(format!("token id {id} outside vocabulary of size {}", self.total_size())))
        }
    }

    pub fn vision_id(&self, index: usize) -> Result<TokenId> {
        offset_into(&self.vision_range, index, "vision")
    }

    pub fn action_id(&self, index: usize) -> Result<TokenId> {
        offset_into(&self.action_range, index, "action")
    }

    pub fn text_id(&self, index: usize) -> Result<TokenId> {
        offset_into(&self.text_range, index, "text")
    }

    pub fn vision_index(&self, id: TokenId) -> Result<usize> {
        index_in(&self.vision_range, id, "vision")
    }

    pub fn action_index(&self, id: TokenId) -> Result<usize> {
        index_in(&self.action_range, id, "action")
    }

    /// Human-auditable manifest: one `id<TAB>tag<TAB>surface` line per entry.
    ///
    /// `text_words` supplies surface forms for the text range; missing entries
    /// are written as `<t:index>`.
    pub fn to_manifest(&self, text_words: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# vocab v1 text={} vision={} action={}\n",
            self.text_range.len(),
            self.vision_range.len(),
            self.action_range.len()
        ));
        for s in Special::ALL {
            out.push_str(&format!("{}\tspecial\t{}\n", s.id(), s.surface()));
        }
        for (i, id) in self.text_range.clone().enumerate() {
            match text_words.get(i) {
                Some(w) => out.push_str(&format!("{id}\ttext\t{w}\n")),
                None => out.push_str(&format!("{id}\ttext\t<t:{i}>\n")),
            }
        }
        for (i, id) in self.vision_range.clone().enumerate() {
            out.push_str(&format!("{id}\tvision\t<v:{i}>\n"));
        }
        for (i, id) in self.action_range.clone().enumerate() {
            out.push_str(&format!("{id}\taction\t<a:{i}>\n"));
        }
        out
    }

    /// Parses a manifest produced by [`Vocabulary::to_manifest`], returning the
    /// vocabulary and the text surface forms.
    pub fn from_manifest(text: &str) -> Result<(Self, Vec<String>)> {
        let mut counts: BTreeMap<Modality, usize> = BTreeMap::new();
        let mut words = Vec::new();
        let mut expected_id: TokenId = 0;
        for line in text.lines() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(tag), Some(surface)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::corrupt(format!("bad vocab manifest line {line:?}")));
            };
            let id: TokenId = id.parse().map_err(|_| Error::corrupt(format!("bad token id in {line:?}")))?;
            if id != expected_id {
                return Err(Error::corrupt(format!("expected id {expected_id}, found {id}")));
            }
            expected_id += 1;
            let tag: Modality = tag.parse()?;
            if tag == Modality::Text {
                words.push(surface.to_string());
            }
            *counts.entry(tag).or_default() += 1;
        }
        let get = |m| counts.get(&m).copied().unwrap_or(0);
        if get(Modality::Special) != NUM_SPECIALS as usize {
            return Err(Error::corrupt("manifest lacks the seven special tokens"));
        }
        let vocab = Self::build(get(Modality::Text), get(Modality::Vision), get(Modality::Action))
            .map_err(|e| Error::corrupt(e.to_string()))?;
        Ok((vocab, words))
    }
}

fn offset_into(range: &Range<TokenId>, index: usize, what: &str) -> Result<TokenId> {
    if index < range.len() {
        Ok(range.start + index as TokenId)
    } else {
        Err(Error::invalid(format!("{what} index {index} exceeds range size {}", range.len())))
    }
}

fn index_in(range: &Range<TokenId>, id: TokenId, what: &str) -> Result<usize> {
    if range.contains(&id) {
        Ok((id - range.start) as usize)
    } else {
        Err(Error::invalid(format!("token {id} is not a {what} token")))
    }
}

/// Word-level instruction tokenizer. Entry 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenizer {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TextTokenizer {
    pub const UNK: &'static str = "<unk>";

    pub fn fit<'a>(instructions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for instr in instructions {
            for w in instr.split_whitespace() {
                set.insert(w.to_lowercase());
            }
        }
        let mut words = vec![Self::UNK.to_string()];
        words.extend(set);
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                let idx = self.index.get(&w.to_lowercase()).copied().unwrap_or(0);
                vocab.text_id(idx)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId], vocab: &Vocabulary) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                let i = (id as usize)
                    .checked_sub(vocab.text_range().start as usize)
                    .filter(|&i| i < vocab.text_range().len())
                    .ok_or_else(|| Error::invalid(format!("token {id} is not text")))?;
                Ok(self.words.get(i).map(String::as_str).unwrap_or(Self::UNK))
            })
            .collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_put_actions_last() {
        let v = Vocabulary::build(100, 256, 1024).unwrap();
        assert_eq!(v.total_size(), 1387);
        assert_eq!(v.action_range(), 363..1387);
        assert_eq!(v.action_range().len(), 1024);
    }

    #[test]
    fn minimal_partition_is_disjoint() {
        let v = Vocabulary::build(1, 1, 1).unwrap();
        assert_eq!(v.text_range(), 7..8);
        assert_eq!(v.vision_range(), 8..9);
        assert_eq!(v.action_range(), 9..10);
    }

    #[test]
    fn partition_covers_without_gaps() {
        let v = Vocabulary::build(10, 20, 30).unwrap();
        assert_eq!(v.total_size(), 67);
        let covered = NUM_SPECIALS as usize + v.text_range().len() + v.vision_range().len() + v.action_range().len();
        assert_eq!(covered, 67);
        assert_eq!(v.text_range().end, v.vision_range().start);
        assert_eq!(v.vision_range().end, v.action_range().start);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(Vocabulary::build(0, 1, 1).is_err());
        assert!(Vocabulary::build(1, 0, 1).is_err());
        assert!(Vocabulary::build(1, 1, 0).is_err());
    }

    #[test]
    fn classify_boundaries() {
        let v = Vocabulary::build(10, 20, 30).unwrap();
        assert_eq!(v.classify(0).unwrap(), Modality::Special);
        assert_eq!(v.classify(v.total_size() as u32 - 1).unwrap(), Modality::Action);
        assert!(v.classify(v.total_size() as u32).is_err());
        for s in Special::ALL {
            assert_eq!(v.classify(v.special(s)).unwrap(), Modality::Special);
        }
        assert_eq!([BOS, EOS, PAD, BOI, EOI, BOA, EOA], [0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn manifest_round_trip() {
        let tok = TextTokenizer::fit(["move the red block", "to the blue pad"]);
        let v = Vocabulary::build(tok.len(), 4, 3).unwrap();
        let m = v.to_manifest(tok.words());
        let (back, words) = Vocabulary::from_manifest(&m).unwrap();
        assert_eq!(back, v);
        assert_eq!(words, tok.words());
        assert!(m.lines().nth(1).unwrap().starts_with("0\tspecial\t<bos>"));
    }

    #[test]
    fn text_round_trip_and_unknown_words() {
        let tok = TextTokenizer::fit(["move the red block to the blue pad"]);
        let v = Vocabulary::build(tok.len(), 2, 2).unwrap();
        let ids = tok.encode("move the red block", &v).unwrap();
        assert_eq!(tok.decode(&ids, &v).unwrap(), "move the red block");
        let unk = tok.encode("purple", &v).unwrap();
        assert_eq!(unk, vec![v.text_range().start]);
    }
}
