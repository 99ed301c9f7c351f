//! Autoregressive decoding with a key/value cache.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{gelu, layernorm, linear, run_forward, softmax_prefix};
use super::{ModelParams, Real};
use crate::error::{ensure, Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Newly generated tokens, including the stop token if one was emitted.
    pub tokens: Vec<TokenId>,
    pub stopped: bool,
}

/// Per-layer keys and values of every position seen so far.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    /// Runs the prompt through the model and returns next-token logits.
    pub fn prefill(params: &ModelParams<F>, ids: &[TokenId]) -> Result<(Self, Vec<F>)> {
        let cfg = params.cfg;
        let c = cfg.d_model;
        let fwd = run_forward(params, &[ids], None)?;
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        for lc in &fwd.layers {
            keys.push(lc.qkv.slice(s![.., c..2 * c]).iter().copied().collect());
            values.push(lc.qkv.slice(s![.., 2 * c..]).iter().copied().collect());
        }
        let layout = params.layout();
        let last = fwd.lnf.slice(s![ids.len() - 1..ids.len(), ..]);
        let logits = linear(&last, params.mat(layout.head_w, c, cfg.vocab_size), None);
        Ok((Self { keys, values, len: ids.len() }, logits.into_raw_vec_and_offset().0))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the logits that follow it.
    pub fn step(&mut self, params: &ModelParams<F>, token: TokenId) -> Result<Vec<F>> {
        let cfg = params.cfg;
        let layout = params.layout();
        let (c, nh) = (cfg.d_model, cfg.n_heads);
        let hs = c / nh;
        if self.len >= cfg.max_seq_len {
            return Err(Error::BudgetExceeded { used: self.len + 1, limit: cfg.max_seq_len });
        }
        ensure!((token as usize) < cfg.vocab_size, "token id {token} outside vocabulary");
        let pos = self.len;
        let wte = params.mat(layout.wte, cfg.vocab_size, c);
        let wpe = params.mat(layout.wpe, cfg.max_seq_len, c);
        let mut x = Array2::from_shape_fn((1, c), |(_, j)| wte[[token as usize, j]] + wpe[[pos, j]]);
        let scale = F::of(1.0 / (hs as f64).sqrt());
        let mut scores = vec![F::zero(); pos + 1];
        for (l, lo) in layout.layers.iter().enumerate() {
            let (ln1, _) = layernorm(&x, params.vec(lo.ln1_w, c), params.vec(lo.ln1_b, c));
            let qkv = linear(&ln1.view(), params.mat(lo.qkv_w, c, 3 * c), Some(params.vec(lo.qkv_b, 3 * c)));
            let row = qkv.row(0);
            self.keys[l].extend(row.slice(s![c..2 * c]).iter().copied());
            self.values[l].extend(row.slice(s![2 * c..]).iter().copied());
            let (keys, vals) = (&self.keys[l], &self.values[l]);
            let mut att = Array2::zeros((1, c));
            for h in 0..nh {
                let q = &row.as_slice().expect("contiguous")[h * hs..(h + 1) * hs];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[j * c + h * hs..j * c + (h + 1) * hs];
                    *sc = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                softmax_prefix(&mut scores, pos + 1);
                for (j, &p) in scores.iter().enumerate() {
                    let v = &vals[j * c + h * hs..j * c + (h + 1) * hs];
                    for (d, &vv) in v.iter().enumerate() {
                        att[[0, h * hs + d]] += p * vv;
                    }
                }
            }
            let proj = linear(&att.view(), params.mat(lo.proj_w, c, c), Some(params.vec(lo.proj_b, c)));
            x += &proj;
            let (ln2, _) = layernorm(&x, params.vec(lo.ln2_w, c), params.vec(lo.ln2_b, c));
            let fc =
                linear(&ln2.view(), params.mat(lo.fc_w, c, cfg.d_ff), Some(params.vec(lo.fc_b, cfg.d_ff))).mapv(gelu);
            let out = linear(&fc.view(), params.mat(lo.fcp_w, cfg.d_ff, c), Some(params.vec(lo.fcp_b, c)));
            x += &out;
        }
        self.len += 1;
        let (lnf, _) = layernorm(&x, params.vec(layout.lnf_w, c), params.vec(layout.lnf_b, c));
        let logits = linear(&lnf.view(), params.mat(layout.head_w, c, cfg.vocab_size), None);
        Ok(logits.into_raw_vec_and_offset().0)
    }
}

fn argmax<F: Real>(logits: &[F]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_top_k<F: Real>(logits: &[F], k: usize, rng: &mut ChaCha8Rng) -> TokenId {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    let m = logits[idx[0]].as_f64();
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i].as_f64() - m).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return i as TokenId;
        }
        u -= wi;
    }
    idx[idx.len() - 1] as TokenId
}

/// Extends `prefix` until a token from `stop` is emitted or `max_new` tokens
/// have been produced. Running past the context window is an error.
pub fn generate<F: Real>(
    params: &ModelParams<F>,
    prefix: &[TokenId],
    stop: &[TokenId],
    max_new: usize,
    decoding: Decoding,
) -> Result<Generation> {
    generate_until(params, prefix, max_new, decoding, |toks| stop.contains(toks.last().expect("nonempty")))
}

/// Like [`generate`] with a caller-supplied stop rule, consulted after every
/// new token with everything generated so far.
pub fn generate_until<F: Real>(
    params: &ModelParams<F>,
    prefix: &[TokenId],
    max_new: usize,
    decoding: Decoding,
    mut stop: impl FnMut(&[TokenId]) -> bool,
) -> Result<Generation> {
    ensure!(!prefix.is_empty(), "empty prompt");
    let limit = params.cfg.max_seq_len;
    if prefix.len() > limit {
        return Err(Error::BudgetExceeded { used: prefix.len(), limit });
    }
    let mut rng = match decoding {
        Decoding::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let (mut cache, mut logits) = KvCache::prefill(params, prefix)?;
    let mut tokens = Vec::new();
    for i in 0..max_new {
        if prefix.len() + tokens.len() + 1 > limit {
            return Err(Error::BudgetExceeded { used: prefix.len() + tokens.len() + 1, limit });
        }
        let tok = match (decoding, rng.as_mut()) {
            (Decoding::TopK { k, .. }, Some(r)) => sample_top_k(&logits, k, r),
            _ => argmax(&logits),
        };
        tokens.push(tok);
        if stop(&tokens) {
            return Ok(Generation { tokens, stopped: true });
        }
        if i + 1 < max_new {
            logits = cache.step(params, tok)?;
        }
    }
    Ok(Generation { tokens, stopped: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn params() -> ModelParams<f64> {
        let cfg =
            ModelConfig { vocab_size: 7, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 12, dropout: 0.0 };
        let mut p = ModelParams::<f64>::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in p.data_mut() {
            *v += 0.8 * (rng.random::<f64>() - 0.5);
        }
        p
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let p = params();
        let ids = [1, 3, 5, 2, 6, 0, 4];
        let full = forward(&p, &ids).unwrap();
        let (mut cache, first) = KvCache::prefill(&p, &ids[..3]).unwrap();
        let mut got = vec![first];
        for &t in &ids[3..] {
            got.push(cache.step(&p, t).unwrap());
        }
        for (k, row) in got.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(k + 2)) {
                assert!((a - b).abs() < 1e-10, "row {}", k + 2);
            }
        }
    }

    #[test]
    fn greedy_matches_naive_argmax_loop() {
        let p = params();
        let g = generate(&p, &[1, 2], &[], 6, Decoding::Greedy).unwrap();
        let mut seq = vec![1, 2];
        for _ in 0..6 {
            let logits = forward(&p, &seq).unwrap();
            let last = logits.row(seq.len() - 1).to_vec();
            seq.push(argmax(&last));
        }
        assert_eq!(g.tokens, seq[2..]);
        assert!(!g.stopped);
    }

    #[test]
    fn stops_on_stop_token() {
        let p = params();
        let free = generate(&p, &[1, 2], &[], 6, Decoding::Greedy).unwrap();
        let stop = free.tokens[2];
        let g = generate(&p, &[1, 2], &[stop], 6, Decoding::Greedy).unwrap();
        assert!(g.stopped);
        assert_eq!(*g.tokens.last().unwrap(), stop);
        assert!(g.tokens.len() <= 3);
    }

    #[test]
    fn context_overflow_is_budget_error() {
        let p = params();
        let r = generate(&p, &[1; 10], &[], 5, Decoding::Greedy);
        assert!(matches!(r, Err(Error::BudgetExceeded { limit: 12, .. })));
        assert!(generate(&p, &[1; 10], &[], 2, Decoding::Greedy).is_ok());
    }

    #[test]
    fn top_k_is_seeded() {
        let p = params();
        let a = generate(&p, &[1], &[], 8, Decoding::TopK { k: 3, seed: 5 }).unwrap();
        let b = generate(&p, &[1], &[], 8, Decoding::TopK { k: 3, seed: 5 }).unwrap();
        assert_eq!(a, b);
        let g1 = generate(&p, &[1], &[], 8, Decoding::TopK { k: 1, seed: 9 }).unwrap();
        let gg = generate(&p, &[1], &[], 8, Decoding::Greedy).unwrap();
        assert_eq!(g1, gg);
    }
}
