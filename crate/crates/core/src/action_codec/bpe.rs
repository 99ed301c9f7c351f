//! Byte-pair encoding over a contiguous integer alphabet.
//!
//! Base symbols are the integers `lo..=hi`, mapped to ids `0..n_base`. Merge
//! `r` introduces id `n_base + r`. Training counts adjacent pairs (overlapping
//! runs count every position), picks the most frequent pair and breaks ties
//! by the smallest `(left, right)` id pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::RangeInclusive;

use crate::error::{ensure, Error, Result};

pub type Symbol = u32;
type Pair = (Symbol, Symbol);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    alphabet: RangeInclusive<i32>,
    merges: Vec<Pair>,
    ranks: HashMap<Pair, u32>,
}

fn apply_merge(word: &mut Vec<Symbol>, pair: Pair, new_id: Symbol) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

fn add_pairs(word: &[Symbol], weight: i64, counts: &mut HashMap<Pair, i64>) {
    for w in word.windows(2) {
        *counts.entry((w[0], w[1])).or_default() += weight;
    }
}

impl BpeModel {
    pub fn fit(corpus: &[Vec<i32>], target: usize, alphabet: RangeInclusive<i32>) -> Result<Self> {
        ensure!(!corpus.is_empty(), "cannot fit BPE on an empty corpus");
        ensure!(!alphabet.is_empty(), "empty base alphabet");
        let n_base = (*alphabet.end() as i64 - *alphabet.start() as i64 + 1) as usize;
        ensure!(target >= n_base, "target vocabulary {target} smaller than base alphabet {n_base}");
        let mut model = Self { alphabet, merges: Vec::new(), ranks: HashMap::new() };

        // Deduplicate identical sequences; counts become weights.
        let mut uniq: BTreeMap<Vec<Symbol>, i64> = BTreeMap::new();
        for seq in corpus {
            *uniq.entry(model.to_base(seq)?).or_default() += 1;
        }
        let mut words: Vec<(Vec<Symbol>, i64)> = uniq.into_iter().collect();

        let mut counts: HashMap<Pair, i64> = HashMap::new();
        let mut where_: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
        for (wi, (w, c)) in words.iter().enumerate() {
            add_pairs(w, *c, &mut counts);
            for p in w.windows(2) {
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }

        while model.vocab_size() < target {
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(p, _)| *p);
            let Some(pair) = best else { break };
            let new_id = model.vocab_size() as Symbol;
            let affected = where_.remove(&pair).unwrap_or_default();
            for wi in affected {
                let (word, weight) = &mut words[wi];
                for p in word.windows(2) {
                    let e = counts.entry((p[0], p[1])).or_default();
                    *e -= *weight;
                }
                apply_merge(word, pair, new_id);
                add_pairs(word, *weight, &mut counts);
                for p in word.windows(2) {
                    where_.entry((p[0], p[1])).or_default().insert(wi);
                }
            }
            counts.retain(|_, c| *c > 0);
            model.ranks.insert(pair, model.merges.len() as u32);
            model.merges.push(pair);
        }
        Ok(model)
    }

    pub fn alphabet(&self) -> RangeInclusive<i32> {
        self.alphabet.clone()
    }

    pub fn n_base(&self) -> usize {
        (*self.alphabet.end() as i64 - *self.alphabet.start() as i64 + 1) as usize
    }

    pub fn merges(&self) -> &[(Symbol, Symbol)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.n_base() + self.merges.len()
    }

    fn to_base(&self, seq: &[i32]) -> Result<Vec<Symbol>> {
        seq.iter()
            .map(|&v| {
                if self.alphabet.contains(&v) {
                    Ok((v - *self.alphabet.start()) as Symbol)
                } else {
                    Err(Error::invalid(format!("value {v} outside BPE alphabet {:?}", self.alphabet)))
                }
            })
            .collect()
    }

    pub fn encode(&self, seq: &[i32]) -> Result<Vec<Symbol>> {
        let mut word = self.to_base(seq)?;
        loop {
            let best = word.windows(2).filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1])))).min();
            let Some((rank, pair)) = best else { break };
            apply_merge(&mut word, pair, (self.n_base() + rank as usize) as Symbol);
        }
        Ok(word)
    }

    /// Number of base symbols `s` expands to, `None` if unknown.
    pub fn expanded_len(&self, s: Symbol) -> Option<usize> {
        let n_base = self.n_base() as Symbol;
        if s < n_base {
            return Some(1);
        }
        let (l, r) = *self.merges.get((s - n_base) as usize)?;
        Some(self.expanded_len(l)? + self.expanded_len(r)?)
    }

    pub fn decode(&self, symbols: &[Symbol]) -> Result<Vec<i32>> {
        let mut out = Vec::with_capacity(symbols.len() * 2);
        let mut stack = Vec::new();
        for &s in symbols.iter().rev() {
            stack.push(s);
        }
        let n_base = self.n_base() as Symbol;
        while let Some(s) = stack.pop() {
            if s < n_base {
                out.push(*self.alphabet.start() + s as i32);
            } else {
                let (l, r) = *self
                    .merges
                    .get((s - n_base) as usize)
                    .ok_or_else(|| Error::corrupt(format!("BPE symbol {s} not in vocabulary")))?;
                stack.push(r);
                stack.push(l);
            }
        }
        Ok(out)
    }

    /// Text form: version, alphabet bounds, then the ordered merge list.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "bpe v1\nalphabet {} {}\nmerges {}\n",
            self.alphabet.start(),
            self.alphabet.end(),
            self.merges.len()
        );
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |what: &str| Error::corrupt(format!("bpe file: {what}"));
        if lines.next() != Some("bpe v1") {
            return Err(bad("missing version line"));
        }
        let alpha: Vec<i32> = lines
            .next()
            .and_then(|l| l.strip_prefix("alphabet "))
            .map(|r| r.split_whitespace().filter_map(|x| x.parse().ok()).collect())
            .ok_or_else(|| bad("missing alphabet"))?;
        if alpha.len() != 2 || alpha[0] > alpha[1] {
            return Err(bad("bad alphabet bounds"));
        }
        let m: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad("missing merge count"))?;
        let mut model = Self { alphabet: alpha[0]..=alpha[1], merges: Vec::with_capacity(m), ranks: HashMap::new() };
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let ids: Vec<Symbol> = line.split_whitespace().filter_map(|x| x.parse().ok()).collect();
            let limit = model.vocab_size() as Symbol;
            if ids.len() != 2 || ids[0] >= limit || ids[1] >= limit {
                return Err(bad(&format!("bad merge {line:?}")));
            }
            model.ranks.insert((ids[0], ids[1]), model.merges.len() as u32);
            model.merges.push((ids[0], ids[1]));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn letters(s: &str) -> Vec<i32> {
        s.bytes().map(|b| (b - b'a') as i32).collect()
    }

    /// Recounts every adjacent pair from scratch after each merge.
    fn brute_force_merges(corpus: &[Vec<i32>], lo: i32, hi: i32, target: usize) -> Vec<Pair> {
        let n_base = (hi - lo + 1) as usize;
        let mut words: Vec<Vec<Symbol>> =
            corpus.iter().map(|w| w.iter().map(|&v| (v - lo) as Symbol).collect()).collect();
        let mut merges = Vec::new();
        while n_base + merges.len() < target {
            let mut counts: BTreeMap<Pair, usize> = BTreeMap::new();
            for w in &words {
                for i in 0..w.len().saturating_sub(1) {
                    *counts.entry((w[i], w[i + 1])).or_default() += 1;
                }
            }
            let mut best: Option<(Pair, usize)> = None;
            for (p, c) in counts {
                if c >= 2 && best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some((pair, _)) = best else { break };
            let id = (n_base + merges.len()) as Symbol;
            for w in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                        out.push(id);
                        i += 2;
                    } else {
                        out.push(w[i]);
                        i += 1;
                    }
                }
                *w = out;
            }
            merges.push(pair);
        }
        merges
    }

    #[test]
    fn dominant_pair_merges_first() {
        let corpus = vec![letters("aaab"); 5];
        let m = BpeModel::fit(&corpus, 4, 0..=1).unwrap();
        assert_eq!(m.merges()[0], (0, 0));
    }

    #[test]
    fn lossless_on_training_data() {
        let corpus: Vec<Vec<i32>> =
            ["abcabcab", "aaaaab", "cabbage", "bbbbbbb", "e"].iter().map(|s| letters(s)).collect();
        let m = BpeModel::fit(&corpus, 20, 0..=6).unwrap();
        for s in &corpus {
            assert_eq!(&m.decode(&m.encode(s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn merges_match_brute_force_counter() {
        let corpus: Vec<Vec<i32>> =
            ["abcdeabcde", "aabbccdd", "eeeee", "abab", "cdecde", "ba"].iter().map(|s| letters(s)).collect();
        let fitted = BpeModel::fit(&corpus, 14, 0..=4).unwrap();
        let oracle = brute_force_merges(&corpus, 0, 4, 14);
        assert_eq!(fitted.merges(), oracle.as_slice());
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = BpeModel::fit(&[letters("abcd")], 100, 0..=3).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), 4);
    }

    #[test]
    fn errors() {
        assert!(BpeModel::fit(&[], 10, 0..=1).is_err());
        assert!(BpeModel::fit(&[letters("ab")], 1, 0..=1).is_err());
        assert!(BpeModel::fit(&[vec![5]], 10, 0..=1).is_err());
        let m = BpeModel::fit(&[letters("abab"), letters("abab")], 3, 0..=1).unwrap();
        assert!(matches!(m.decode(&[99]), Err(Error::CorruptStream(_))));
    }

    #[test]
    fn expanded_lengths() {
        let corpus = vec![letters("abababab"); 4];
        let m = BpeModel::fit(&corpus, 6, 0..=1).unwrap();
        for s in 0..m.vocab_size() as Symbol {
            assert_eq!(m.expanded_len(s), Some(m.decode(&[s]).unwrap().len()));
        }
        assert_eq!(m.expanded_len(99), None);
    }

    #[test]
    fn text_round_trip() {
        let corpus = vec![letters("abcabcabc"); 3];
        let m = BpeModel::fit(&corpus, 8, -2..=3).unwrap();
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }
}
