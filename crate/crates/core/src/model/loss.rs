//! Next-token cross-entropy over precomputed logits.
//!
//! Row `p - 1` of `logits` predicts `targets[p]`; position 0 is never a target.
//! Targets are passed separately from the ids the logits were computed on, so
//! labels can be changed without touching the inputs.

use ndarray::ArrayView2;

use super::Real;
use crate::error::{ensure, Result};
use crate::vocab::TokenId;

pub fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Mean negative log-likelihood over positions where `mask` is set.
pub fn loss<F: Real>(logits: ArrayView2<'_, F>, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    ensure!(targets.len() == mask.len(), "targets and mask differ in length");
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    loss_with_weights(logits, targets, &weights)
}

/// `(w_v * sum_vision + w_a * sum_action) / (w_v * |vision| + w_a * |action|)`.
pub fn loss_weighted<F: Real>(
    logits: ArrayView2<'_, F>,
    targets: &[TokenId],
    mask_vision: &[bool],
    mask_action: &[bool],
    w_v: f64,
    w_a: f64,
) -> Result<f64> {
    ensure!(
        targets.len() == mask_vision.len() && targets.len() == mask_action.len(),
        "targets and masks differ in length"
    );
    ensure!(w_v >= 0.0 && w_a >= 0.0, "loss weights must be non-negative");
    let mut weights = Vec::with_capacity(targets.len());
    for (p, (&v, &a)) in mask_vision.iter().zip(mask_action).enumerate() {
        ensure!(!(v && a), "vision and action masks overlap at position {p}");
        weights.push(if v {
            w_v
        } else if a {
            w_a
        } else {
            0.0
        });
    }
    loss_with_weights(logits, targets, &weights)
}

/// `sum_p w_p * nll_p / sum_p w_p` over positions with positive weight.
pub fn loss_with_weights<F: Real>(logits: ArrayView2<'_, F>, targets: &[TokenId], weights: &[f64]) -> Result<f64> {
    ensure!(targets.len() == weights.len(), "targets and weights differ in length");
    ensure!(
        logits.nrows() + 1 >= targets.len(),
        "{} logit rows cannot cover {} targets",
        logits.nrows(),
        targets.len()
    );
    ensure!(weights.first().is_none_or(|&w| w == 0.0), "position 0 has no preceding logits");
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, (&t, &w)) in targets.iter().zip(weights).enumerate().skip(1) {
        if w == 0.0 {
            continue;
        }
        ensure!(w > 0.0 && w.is_finite(), "bad weight {w} at {p}");
        let row = logits.row(p - 1);
        ensure!((t as usize) < row.len(), "target {t} outside vocabulary");
        let lp = log_softmax_row(&row.to_vec());
        num += -lp[t as usize] * w;
        den += w;
    }
    ensure!(den > 0.0, "no supervised positions");
    Ok(num / den)
}
