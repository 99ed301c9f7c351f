//! Continuous action chunks to discrete tokens and back.
//!
//! The pipeline is normalize, DCT along time, scale-and-round, flatten in
//! frequency-major order, BPE, then offset into the vocabulary's action range.
//! Every stage except rounding is invertible.

mod bpe;
mod dct;
mod normalize;

pub use bpe::{BpeModel, Symbol};
pub use dct::{dct_forward, dct_inverse};
pub use normalize::{percentile_sorted, NormalizationStats};

use crate::error::{ensure, Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const COEFF_MIN: i32 = -512;
pub const COEFF_MAX: i32 = 511;
pub const DEFAULT_SCALE: f64 = 128.0;

/// An `H x d` matrix of actions, stored row-major (time rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    h: usize,
    d: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(h: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(h >= 1 && d >= 1, "action chunk must be at least 1x1, got {h}x{d}");
        ensure!(values.len() == h * d, "expected {} values for a {h}x{d} chunk, got {}", h * d, values.len());
        ensure!(values.iter().all(|v| v.is_finite()), "action chunk has non-finite entries");
        Ok(Self { h, d, values })
    }

    pub fn zeros(h: usize, d: usize) -> Self {
        Self { h, d, values: vec![0.0; h * d] }
    }

    pub(crate) fn from_raw(h: usize, d: usize, values: Vec<f64>) -> Self {
        Self { h, d, values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "no rows");
        let d = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == d), "ragged rows");
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn horizon(&self) -> usize {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.d + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map_dims(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let d = self.d;
        let values = self.values.iter().enumerate().map(|(i, &v)| f(i % d, v)).collect();
        Self { h: self.h, d, values }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.h, self.d), (other.h, other.d));
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelativeMode {
    /// `a[t+1] - a[t]`, one row shorter than the input.
    Consecutive,
    /// `a[t] - a[0]`.
    FirstFrame,
}

pub fn to_relative(absolute: &ActionChunk, mode: RelativeMode) -> Result<ActionChunk> {
    let (t, d) = (absolute.horizon(), absolute.dim());
    match mode {
        RelativeMode::Consecutive => {
            ensure!(t >= 2, "consecutive differencing needs at least 2 rows, got {t}");
            let vals = absolute.values[d..]
                .iter()
                .zip(&absolute.values[..(t - 1) * d])
                .map(|(next, prev)| next - prev)
                .collect();
            Ok(ActionChunk::from_raw(t - 1, d, vals))
        }
        RelativeMode::FirstFrame => {
            let first = absolute.row(0).to_vec();
            Ok(absolute.map_dims(|j, v| v - first[j]))
        }
    }
}

/// Integer coefficient matrix, same layout as [`ActionChunk`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedChunk {
    pub h: usize,
    pub d: usize,
    pub values: Vec<i32>,
}

pub fn quantize(coeffs: &ActionChunk, scale: f64) -> Result<QuantizedChunk> {
    ensure!(scale > 0.0 && scale.is_finite(), "quantization scale must be positive, got {scale}");
    // f64::round rounds half away from zero.
    let values = coeffs.values.iter().map(|c| (scale * c).round() as i32).collect();
    Ok(QuantizedChunk { h: coeffs.h, d: coeffs.d, values })
}

pub fn dequantize(q: &QuantizedChunk, scale: f64) -> Result<ActionChunk> {
    ensure!(scale > 0.0 && scale.is_finite(), "quantization scale must be positive, got {scale}");
    Ok(ActionChunk::from_raw(q.h, q.d, q.values.iter().map(|&v| v as f64 / scale).collect()))
}

/// Frequency-major, dimension-minor ordering.
pub fn flatten(q: &QuantizedChunk) -> Result<Vec<i32>> {
    ensure!(q.h >= 1 && q.d >= 1 && q.values.len() == q.h * q.d, "cannot flatten an empty chunk");
    Ok(q.values.clone())
}

pub fn unflatten(seq: &[i32], h: usize, d: usize) -> Result<QuantizedChunk> {
    ensure!(h >= 1 && d >= 1, "cannot unflatten into an empty chunk");
    if seq.len() != h * d {
        return Err(Error::corrupt(format!("expected {} coefficients for a {h}x{d} chunk, got {}", h * d, seq.len())));
    }
    Ok(QuantizedChunk { h, d, values: seq.to_vec() })
}

/// Largest coefficient magnitude reachable from a normalized chunk: each
/// orthonormal DCT column has L2 norm at most `sqrt(h)`.
pub fn coefficient_alphabet(h: usize, scale: f64) -> std::ops::RangeInclusive<i32> {
    let m = (scale * (h as f64).sqrt()).round();
    let lo = (-m).max(COEFF_MIN as f64) as i32;
    let hi = m.min(COEFF_MAX as f64) as i32;
    lo..=hi
}

/// Fitted normalizer, scale and BPE model for a fixed chunk shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTokenizer {
    pub stats: NormalizationStats,
    pub scale: f64,
    pub bpe: BpeModel,
    pub horizon: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<TokenId>,
    /// Coefficients that had to be clamped into the finite alphabet.
    pub clamped: usize,
}

impl ActionTokenizer {
    pub fn fit(corpus: &[ActionChunk], scale: f64, bpe_vocab: usize) -> Result<Self> {
        ensure!(!corpus.is_empty(), "empty action corpus");
        let (h, d) = (corpus[0].horizon(), corpus[0].dim());
        ensure!(corpus.iter().all(|c| c.horizon() == h && c.dim() == d), "all chunks in the corpus must be {h}x{d}");
        let stats = NormalizationStats::fit(corpus)?;
        let alphabet = coefficient_alphabet(h, scale);
        let mut seqs = Vec::with_capacity(corpus.len());
        for c in corpus {
            let (seq, _) = Self::coefficients(&stats, scale, &alphabet, c)?;
            seqs.push(seq);
        }
        let bpe = BpeModel::fit(&seqs, bpe_vocab, alphabet)?;
        Ok(Self { stats, scale, bpe, horizon: h, dim: d })
    }

    fn coefficients(
        stats: &NormalizationStats,
        scale: f64,
        alphabet: &std::ops::RangeInclusive<i32>,
        chunk: &ActionChunk,
    ) -> Result<(Vec<i32>, usize)> {
        let q = quantize(&dct_forward(&stats.normalize(chunk)?), scale)?;
        let mut clamped = 0;
        let seq = flatten(&q)?
            .into_iter()
            .map(|v| {
                let c = v.clamp(*alphabet.start(), *alphabet.end());
                clamped += usize::from(c != v);
                c
            })
            .collect();
        Ok((seq, clamped))
    }

    pub fn encode_detailed(&self, chunk: &ActionChunk, vocab: &Vocabulary) -> Result<Encoded> {
        ensure!(
            chunk.horizon() == self.horizon && chunk.dim() == self.dim,
            "chunk is {}x{}, tokenizer expects {}x{}",
            chunk.horizon(),
            chunk.dim(),
            self.horizon,
            self.dim
        );
        ensure!(
            self.bpe.vocab_size() <= vocab.action_range().len(),
            "BPE vocabulary {} exceeds action range {}",
            self.bpe.vocab_size(),
            vocab.action_range().len()
        );
        let (seq, clamped) = Self::coefficients(&self.stats, self.scale, &self.bpe.alphabet(), chunk)?;
        let tokens = self.bpe.encode(&seq)?.into_iter().map(|s| vocab.action_id(s as usize)).collect::<Result<_>>()?;
        Ok(Encoded { tokens, clamped })
    }

    pub fn encode(&self, chunk: &ActionChunk, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        Ok(self.encode_detailed(chunk, vocab)?.tokens)
    }

    pub fn decode(&self, tokens: &[TokenId], vocab: &Vocabulary) -> Result<ActionChunk> {
        let symbols = tokens.iter().map(|&t| vocab.action_index(t).map(|i| i as Symbol)).collect::<Result<Vec<_>>>()?;
        let seq = self.bpe.decode(&symbols)?;
        let q = unflatten(&seq, self.horizon, self.dim)?;
        self.stats.denormalize(&dct_inverse(&dequantize(&q, self.scale)?))
    }

    /// Decodes a generated block whose coefficient count may be off. The
    /// stream is frequency-major, so surplus entries are dropped from the
    /// high-frequency end and missing ones are zero. Returns the chunk and
    /// the number of coefficients dropped or filled.
    pub fn decode_lenient(&self, tokens: &[TokenId], vocab: &Vocabulary) -> Result<(ActionChunk, usize)> {
        let symbols = tokens.iter().map(|&t| vocab.action_index(t).map(|i| i as Symbol)).collect::<Result<Vec<_>>>()?;
        let mut seq = self.bpe.decode(&symbols)?;
        let want = self.horizon * self.dim;
        let repaired = seq.len().abs_diff(want);
        seq.resize(want, 0);
        let q = unflatten(&seq, self.horizon, self.dim)?;
        Ok((self.stats.denormalize(&dct_inverse(&dequantize(&q, self.scale)?))?, repaired))
    }

    /// Number of coefficients `tokens` decode to; errors on non-action ids.
    pub fn decoded_len(&self, tokens: &[TokenId], vocab: &Vocabulary) -> Result<usize> {
        let mut n = 0;
        for &t in tokens {
            let s = vocab.action_index(t)? as Symbol;
            n += self
                .bpe
                .expanded_len(s)
                .ok_or_else(|| Error::corrupt(format!("action token {t} not in BPE vocabulary")))?;
        }
        Ok(n)
    }

    /// Text form: header line, then the normalizer and BPE sections.
    pub fn to_text(&self) -> String {
        format!(
            "acttok v1 {} {} {:?}\n{}{}",
            self.horizon,
            self.dim,
            self.scale,
            self.stats.to_text(),
            self.bpe.to_text()
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::corrupt(format!("action tokenizer file: {m}"));
        let (header, rest) = text.split_once('\n').ok_or_else(|| bad("missing header"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != "acttok" || f[1] != "v1" {
            return Err(bad("bad header"));
        }
        let horizon: usize = f[2].parse().map_err(|_| bad("bad horizon"))?;
        let dim: usize = f[3].parse().map_err(|_| bad("bad dim"))?;
        let scale: f64 = f[4].parse().map_err(|_| bad("bad scale"))?;
        let split = rest.find("bpe v1").ok_or_else(|| bad("missing BPE section"))?;
        let stats = NormalizationStats::from_text(&rest[..split])?;
        let bpe = BpeModel::from_text(&rest[split..])?;
        if stats.dim() != dim || horizon == 0 || scale.is_nan() || scale <= 0.0 {
            return Err(bad("inconsistent sections"));
        }
        Ok(Self { stats, scale, bpe, horizon, dim })
    }

    /// Worst-case token count for one chunk (no merges applied).
    pub fn max_tokens(&self) -> usize {
        self.horizon * self.dim
    }
}
