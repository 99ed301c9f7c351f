//! Per-dimension 1st/99th percentile normalization into `[-1, 1]`.

use super::ActionChunk;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub p1: Vec<f64>,
    pub p99: Vec<f64>,
}

/// Linear-interpolation percentile on an ascending slice, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl NormalizationStats {
    pub fn fit(corpus: &[ActionChunk]) -> Result<Self> {
        ensure!(!corpus.is_empty(), "cannot fit normalizer on an empty corpus");
        let d = corpus[0].dim();
        ensure!(corpus.iter().all(|c| c.dim() == d), "all chunks must share the action dimension {d}");
        let mut p1 = Vec::with_capacity(d);
        let mut p99 = Vec::with_capacity(d);
        for j in 0..d {
            let mut pooled: Vec<f64> = corpus.iter().flat_map(|c| (0..c.horizon()).map(move |t| c.get(t, j))).collect();
            pooled.sort_by(f64::total_cmp);
            p1.push(percentile_sorted(&pooled, 1.0));
            p99.push(percentile_sorted(&pooled, 99.0));
        }
        Ok(Self { p1, p99 })
    }

    pub fn dim(&self) -> usize {
        self.p1.len()
    }

    fn check_dim(&self, chunk: &ActionChunk) -> Result<()> {
        ensure!(chunk.dim() == self.dim(), "chunk has {} dims but stats have {}", chunk.dim(), self.dim());
        Ok(())
    }

    pub fn normalize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.check_dim(chunk)?;
        Ok(chunk.map_dims(|j, x| {
            let (lo, hi) = (self.p1[j], self.p99[j]);
            if hi > lo {
                (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        }))
    }

    pub fn denormalize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        self.check_dim(chunk)?;
        Ok(chunk.map_dims(|j, y| {
            let (lo, hi) = (self.p1[j], self.p99[j]);
            (y + 1.0) * 0.5 * (hi - lo) + lo
        }))
    }

    /// Text form: a version line, then one `p1 p99` row per dimension.
    pub fn to_text(&self) -> String {
        let mut s = format!("actstats v1 {}\n", self.dim());
        for (a, b) in self.p1.iter().zip(&self.p99) {
            s.push_str(&format!("{a:?} {b:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::corrupt("empty stats file"))?;
        let d: usize = header
            .strip_prefix("actstats v1 ")
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| Error::corrupt(format!("bad stats header {header:?}")))?;
        let mut p1 = Vec::with_capacity(d);
        let mut p99 = Vec::with_capacity(d);
        for line in lines.by_ref().take(d) {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b))) if a <= b => {
                    p1.push(a);
                    p99.push(b);
                }
                _ => return Err(Error::corrupt(format!("bad stats row {line:?}"))),
            }
        }
        if p1.len() != d {
            return Err(Error::corrupt("stats file truncated"));
        }
        Ok(Self { p1, p99 })
    }
}
