//! Batched forward pass, cross-entropy head and hand-written backward pass.
//!
//! Sequences of different lengths are concatenated row-wise for every dense
//! layer; attention runs per sequence and per head.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{mat_mut, LayerOffsets, ModelParams, Real};
use crate::error::{ensure, Result};
use crate::vocab::{Modality, TokenId};

const LN_EPS: f64 = 1e-5;

/// One supervised position: logits at input row `pos` should predict `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub pos: usize,
    pub target: TokenId,
    pub weight: f64,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainExample {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TargetSpec>,
}

/// Batch loss plus unweighted per-modality sums for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub loss: f64,
    pub weight_total: f64,
    pub action_sum: f64,
    pub action_count: usize,
    pub vision_sum: f64,
    pub vision_count: usize,
    pub other_sum: f64,
    pub other_count: usize,
}

impl LossReport {
    pub fn targets(&self) -> usize {
        self.action_count + self.vision_count + self.other_count
    }

    pub fn action_loss(&self) -> Option<f64> {
        (self.action_count > 0).then(|| self.action_sum / self.action_count as f64)
    }

    pub fn vision_loss(&self) -> Option<f64> {
        (self.vision_count > 0).then(|| self.vision_sum / self.vision_count as f64)
    }
}

pub(crate) struct LayerCache<F> {
    pub x_in: Array2<F>,
    pub ln1: Array2<F>,
    pub ln1_stats: Vec<(F, F)>,
    pub qkv: Array2<F>,
    pub probs: Vec<Array2<F>>,
    pub att: Array2<F>,
    pub drop1: Option<Array2<F>>,
    pub x_mid: Array2<F>,
    pub ln2: Array2<F>,
    pub ln2_stats: Vec<(F, F)>,
    pub fc_pre: Array2<F>,
    pub fc_act: Array2<F>,
    pub drop2: Option<Array2<F>>,
}

pub(crate) struct ForwardCache<F> {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub layers: Vec<LayerCache<F>>,
    pub x_final: Array2<F>,
    pub lnf: Array2<F>,
    pub lnf_stats: Vec<(F, F)>,
}

pub(crate) fn linear<F: Real>(x: &ArrayView2<F>, w: ArrayView2<F>, b: Option<ArrayView1<F>>) -> Array2<F> {
    let (n, o) = (x.nrows(), w.ncols());
    let (mut out, beta) = match b {
        Some(b) => (Array2::from_shape_fn((n, o), |(_, j)| b[j]), F::one()),
        None => (Array2::zeros((n, o)), F::zero()),
    };
    general_mat_mul(F::one(), x, &w, beta, &mut out);
    out
}

fn linear_backward<F: Real>(
    x: &ArrayView2<F>,
    dout: &ArrayView2<F>,
    grads: &mut [F],
    params: &ModelParams<F>,
    w_off: usize,
    b_off: Option<usize>,
) -> Array2<F> {
    let (i, o) = (x.ncols(), dout.ncols());
    {
        let mut dw = mat_mut(grads, w_off, i, o);
        general_mat_mul(F::one(), &x.t(), dout, F::one(), &mut dw);
    }
    if let Some(b) = b_off {
        for (g, s) in grads[b..b + o].iter_mut().zip(dout.sum_axis(Axis(0))) {
            *g += s;
        }
    }
    let w = params.mat(w_off, i, o);
    let mut dx = Array2::zeros((x.nrows(), i));
    general_mat_mul(F::one(), dout, &w.t(), F::zero(), &mut dx);
    dx
}

pub(crate) fn layernorm<F: Real>(x: &Array2<F>, w: ArrayView1<F>, b: ArrayView1<F>) -> (Array2<F>, Vec<(F, F)>) {
    let c = x.ncols();
    let inv_c = F::of(1.0 / c as f64);
    let eps = F::of(LN_EPS);
    let mut out = Array2::zeros(x.raw_dim());
    let mut stats = Vec::with_capacity(x.nrows());
    for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
        let mean = row.iter().copied().sum::<F>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
        let rstd = F::one() / (var + eps).sqrt();
        for j in 0..c {
            o[j] = (row[j] - mean) * rstd * w[j] + b[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

fn layernorm_backward<F: Real>(
    x: &Array2<F>,
    stats: &[(F, F)],
    dy: &Array2<F>,
    grads: &mut [F],
    params: &ModelParams<F>,
    w_off: usize,
    b_off: usize,
) -> Array2<F> {
    let c = x.ncols();
    let inv_c = F::of(1.0 / c as f64);
    let w = params.vec(w_off, c);
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dw = vec![F::zero(); c];
    let mut db = vec![F::zero(); c];
    for (r, (&(mean, rstd), mut dxr)) in stats.iter().zip(dx.rows_mut()).enumerate() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut sum_d = F::zero();
        let mut sum_dx = F::zero();
        for j in 0..c {
            let xhat = (xr[j] - mean) * rstd;
            let dn = dyr[j] * w[j];
            sum_d += dn;
            sum_dx += dn * xhat;
            dw[j] += dyr[j] * xhat;
            db[j] += dyr[j];
        }
        let (md, mdx) = (sum_d * inv_c, sum_dx * inv_c);
        for j in 0..c {
            let xhat = (xr[j] - mean) * rstd;
            dxr[j] = rstd * (dyr[j] * w[j] - md - xhat * mdx);
        }
    }
    for j in 0..c {
        grads[w_off + j] += dw[j];
        grads[b_off + j] += db[j];
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let t = (F::of(GELU_K) * (x + F::of(GELU_C) * x * x * x)).tanh();
    half * x * (F::one() + t)
}

fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let t = (F::of(GELU_K) * (x + F::of(GELU_C) * x * x * x)).tanh();
    let dt = F::of(GELU_K) * (F::one() + F::of(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dt
}

fn dropout_mask<F: Real>(rows: usize, cols: usize, p: f32, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p as f64));
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f32>() < p { F::zero() } else { keep })
}

fn attention_forward<F: Real>(
    qkv: &Array2<F>,
    spans: &[(usize, usize)],
    c: usize,
    nh: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let hs = c / nh;
    let scale = F::of(1.0 / (hs as f64).sqrt());
    let mut out = Array2::zeros((qkv.nrows(), c));
    let mut probs = Vec::with_capacity(spans.len() * nh);
    for &(start, len) in spans {
        let rows = start..start + len;
        for h in 0..nh {
            let q = qkv.slice(s![rows.clone(), h * hs..(h + 1) * hs]);
            let k = qkv.slice(s![rows.clone(), c + h * hs..c + (h + 1) * hs]);
            let v = qkv.slice(s![rows.clone(), 2 * c + h * hs..2 * c + (h + 1) * hs]);
            let mut p = Array2::zeros((len, len));
            general_mat_mul(scale, &q, &k.t(), F::zero(), &mut p);
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                softmax_prefix(row.as_slice_mut().expect("contiguous"), i + 1);
            }
            let mut o = out.slice_mut(s![rows.clone(), h * hs..(h + 1) * hs]);
            general_mat_mul(F::one(), &p, &v, F::zero(), &mut o);
            probs.push(p);
        }
    }
    (out, probs)
}

/// Softmax over `row[..n]`, zeros after.
pub(crate) fn softmax_prefix<F: Real>(row: &mut [F], n: usize) {
    let m = row[..n].iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in &mut row[..n] {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in &mut row[..n] {
        *v = *v / z;
    }
    row[n..].fill(F::zero());
}

fn attention_backward<F: Real>(
    qkv: &Array2<F>,
    probs: &[Array2<F>],
    d_att: &Array2<F>,
    spans: &[(usize, usize)],
    c: usize,
    nh: usize,
) -> Array2<F> {
    let hs = c / nh;
    let scale = F::of(1.0 / (hs as f64).sqrt());
    let mut d_qkv = Array2::zeros(qkv.raw_dim());
    let mut idx = 0;
    for &(start, len) in spans {
        let rows = start..start + len;
        for h in 0..nh {
            let p = &probs[idx];
            idx += 1;
            let (qc, kc, vc) = (h * hs, c + h * hs, 2 * c + h * hs);
            let q = qkv.slice(s![rows.clone(), qc..qc + hs]);
            let k = qkv.slice(s![rows.clone(), kc..kc + hs]);
            let v = qkv.slice(s![rows.clone(), vc..vc + hs]);
            let dout = d_att.slice(s![rows.clone(), qc..qc + hs]);
            let mut dp = Array2::zeros((len, len));
            general_mat_mul(F::one(), &dout, &v.t(), F::zero(), &mut dp);
            general_mat_mul(F::one(), &p.t(), &dout, F::zero(), &mut d_qkv.slice_mut(s![rows.clone(), vc..vc + hs]));
            for i in 0..len {
                let dot: F = (0..=i).map(|j| p[[i, j]] * dp[[i, j]]).sum();
                for j in 0..len {
                    dp[[i, j]] = if j <= i { p[[i, j]] * (dp[[i, j]] - dot) } else { F::zero() };
                }
            }
            general_mat_mul(scale, &dp, &k, F::zero(), &mut d_qkv.slice_mut(s![rows.clone(), qc..qc + hs]));
            general_mat_mul(scale, &dp.t(), &q, F::zero(), &mut d_qkv.slice_mut(s![rows.clone(), kc..kc + hs]));
        }
    }
    d_qkv
}

pub(crate) fn run_forward<F: Real>(
    params: &ModelParams<F>,
    seqs: &[&[TokenId]],
    mut drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<F>> {
    let cfg = params.cfg;
    let layout = params.layout();
    let c = cfg.d_model;
    ensure!(!seqs.is_empty(), "empty batch");
    let mut spans = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for s in seqs {
        ensure!(!s.is_empty(), "empty sequence in batch");
        ensure!(s.len() <= cfg.max_seq_len, "sequence of {} tokens exceeds context of {}", s.len(), cfg.max_seq_len);
        spans.push((ids.len(), s.len()));
        for (p, &id) in s.iter().enumerate() {
            ensure!((id as usize) < cfg.vocab_size, "token id {id} outside vocabulary of {}", cfg.vocab_size);
            ids.push(id);
            positions.push(p);
        }
    }
    let n = ids.len();
    let wte = params.mat(layout.wte, cfg.vocab_size, c);
    let wpe = params.mat(layout.wpe, cfg.max_seq_len, c);
    let mut x = Array2::from_shape_fn((n, c), |(i, j)| wte[[ids[i] as usize, j]] + wpe[[positions[i], j]]);

    let p_drop = cfg.dropout;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &layout.layers {
        let (ln1, ln1_stats) = layernorm(&x, params.vec(lo.ln1_w, c), params.vec(lo.ln1_b, c));
        let qkv = linear(&ln1.view(), params.mat(lo.qkv_w, c, 3 * c), Some(params.vec(lo.qkv_b, 3 * c)));
        let (att, probs) = attention_forward(&qkv, &spans, c, cfg.n_heads);
        let mut branch = linear(&att.view(), params.mat(lo.proj_w, c, c), Some(params.vec(lo.proj_b, c)));
        let drop1 = match drop_rng.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(dropout_mask(n, c, p_drop, rng)),
            _ => None,
        };
        if let Some(m) = &drop1 {
            branch *= m;
        }
        let x_mid = &x + &branch;
        let (ln2, ln2_stats) = layernorm(&x_mid, params.vec(lo.ln2_w, c), params.vec(lo.ln2_b, c));
        let fc_pre = linear(&ln2.view(), params.mat(lo.fc_w, c, cfg.d_ff), Some(params.vec(lo.fc_b, cfg.d_ff)));
        let fc_act = fc_pre.mapv(gelu);
        let mut branch = linear(&fc_act.view(), params.mat(lo.fcp_w, cfg.d_ff, c), Some(params.vec(lo.fcp_b, c)));
        let drop2 = match drop_rng.as_deref_mut() {
            Some(rng) if p_drop > 0.0 => Some(dropout_mask(n, c, p_drop, rng)),
            _ => None,
        };
        if let Some(m) = &drop2 {
            branch *= m;
        }
        let x_out = &x_mid + &branch;
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            ln1_stats,
            qkv,
            probs,
            att,
            drop1,
            x_mid,
            ln2,
            ln2_stats,
            fc_pre,
            fc_act,
            drop2,
        });
    }
    let (lnf, lnf_stats) = layernorm(&x, params.vec(layout.lnf_w, c), params.vec(layout.lnf_b, c));
    Ok(ForwardCache { ids, positions, spans, layers, x_final: x, lnf, lnf_stats })
}

/// Logits for every position of one sequence (`T x V`).
pub fn forward<F: Real>(params: &ModelParams<F>, ids: &[TokenId]) -> Result<Array2<F>> {
    let cache = run_forward(params, &[ids], None)?;
    let layout = params.layout();
    let head = params.mat(layout.head_w, params.cfg.d_model, params.cfg.vocab_size);
    Ok(linear(&cache.lnf.view(), head, None))
}

fn backward_layer<F: Real>(
    params: &ModelParams<F>,
    lo: &LayerOffsets,
    lc: &LayerCache<F>,
    spans: &[(usize, usize)],
    dx: Array2<F>,
    grads: &mut [F],
) -> Array2<F> {
    let cfg = params.cfg;
    let c = cfg.d_model;

    let mut d_branch = dx.clone();
    if let Some(m) = &lc.drop2 {
        d_branch *= m;
    }
    let d_act = linear_backward(&lc.fc_act.view(), &d_branch.view(), grads, params, lo.fcp_w, Some(lo.fcp_b));
    let mut d_pre = d_act;
    d_pre.zip_mut_with(&lc.fc_pre, |d, &x| *d *= gelu_grad(x));
    let d_ln2 = linear_backward(&lc.ln2.view(), &d_pre.view(), grads, params, lo.fc_w, Some(lo.fc_b));
    let mut dx_mid = layernorm_backward(&lc.x_mid, &lc.ln2_stats, &d_ln2, grads, params, lo.ln2_w, lo.ln2_b);
    dx_mid += &dx;

    let mut d_branch = dx_mid.clone();
    if let Some(m) = &lc.drop1 {
        d_branch *= m;
    }
    let d_att = linear_backward(&lc.att.view(), &d_branch.view(), grads, params, lo.proj_w, Some(lo.proj_b));
    let d_qkv = attention_backward(&lc.qkv, &lc.probs, &d_att, spans, c, cfg.n_heads);
    let d_ln1 = linear_backward(&lc.ln1.view(), &d_qkv.view(), grads, params, lo.qkv_w, Some(lo.qkv_b));
    let mut dx_in = layernorm_backward(&lc.x_in, &lc.ln1_stats, &d_ln1, grads, params, lo.ln1_w, lo.ln1_b);
    dx_in += &dx_mid;
    dx_in
}

/// Weighted mean next-token loss over all targets of the batch, and its
/// gradient with respect to every parameter.
pub fn loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    batch: &[TrainExample],
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossReport, Vec<F>)> {
    let (report, grads) = loss_impl(params, batch, drop_rng, true)?;
    Ok((report, grads.expect("gradients requested")))
}

/// Loss only; no activations are kept for a backward pass.
pub fn eval_loss<F: Real>(params: &ModelParams<F>, batch: &[TrainExample]) -> Result<LossReport> {
    Ok(loss_impl(params, batch, None, false)?.0)
}

fn loss_impl<F: Real>(
    params: &ModelParams<F>,
    batch: &[TrainExample],
    drop_rng: Option<&mut ChaCha8Rng>,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<F>>)> {
    let cfg = params.cfg;
    let layout = params.layout();
    let (c, v) = (cfg.d_model, cfg.vocab_size);
    let seqs: Vec<&[TokenId]> = batch.iter().map(|e| e.inputs.as_slice()).collect();
    let cache = run_forward(params, &seqs, drop_rng)?;

    let mut rows = Vec::new();
    let mut report = LossReport::default();
    for (ex, &(start, len)) in batch.iter().zip(&cache.spans) {
        for t in &ex.targets {
            ensure!(t.pos < len, "target position {} beyond sequence of {len}", t.pos);
            ensure!((t.target as usize) < v, "target id {} outside vocabulary", t.target);
            ensure!(t.weight >= 0.0 && t.weight.is_finite(), "bad target weight {}", t.weight);
            rows.push((start + t.pos, *t));
            report.weight_total += t.weight;
        }
    }
    ensure!(report.weight_total > 0.0, "batch has no supervised targets");

    let sel = Array2::from_shape_fn((rows.len(), c), |(i, j)| cache.lnf[[rows[i].0, j]]);
    let head = params.mat(layout.head_w, c, v);
    let mut logits = linear(&sel.view(), head, None);
    let mut total = 0.0;
    for (mut z, (_, t)) in logits.rows_mut().into_iter().zip(&rows) {
        let z = z.as_slice_mut().expect("contiguous");
        let m = z.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = z.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        let nll = (lse - z[t.target as usize]).as_f64();
        total += t.weight * nll;
        match t.modality {
            Modality::Action => {
                report.action_sum += nll;
                report.action_count += 1;
            }
            Modality::Vision => {
                report.vision_sum += nll;
                report.vision_count += 1;
            }
            _ => {
                report.other_sum += nll;
                report.other_count += 1;
            }
        }
        if want_grad {
            // Reuse the row for d loss / d logits.
            let scale = F::of(t.weight / report.weight_total);
            for x in z.iter_mut() {
                *x = (*x - lse).exp() * scale;
            }
            z[t.target as usize] -= scale;
        }
    }
    report.loss = total / report.weight_total;
    if !want_grad {
        return Ok((report, None));
    }

    let mut grads = vec![F::zero(); params.data.len()];
    let d_sel = linear_backward(&sel.view(), &logits.view(), &mut grads, params, layout.head_w, None);
    let mut d_lnf = Array2::zeros(cache.lnf.raw_dim());
    for (i, &(r, _)) in rows.iter().enumerate() {
        let mut dst = d_lnf.row_mut(r);
        dst += &d_sel.row(i);
    }
    let mut dx =
        layernorm_backward(&cache.x_final, &cache.lnf_stats, &d_lnf, &mut grads, params, layout.lnf_w, layout.lnf_b);
    for (lo, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        dx = backward_layer(params, lo, lc, &cache.spans, dx, &mut grads);
    }
    {
        let mut wte = mat_mut(&mut grads, layout.wte, v, c);
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut r = wte.row_mut(id as usize);
            r += &dx.row(i);
        }
    }
    {
        let mut wpe = mat_mut(&mut grads, layout.wpe, cfg.max_seq_len, c);
        for (i, &p) in cache.positions.iter().enumerate() {
            let mut r = wpe.row_mut(p);
            r += &dx.row(i);
        }
    }
    Ok((report, Some(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::Error;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 9, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 10, dropout: 0.0 }
    }

    fn example(ids: &[TokenId], weights: &[(usize, f64, Modality)]) -> TrainExample {
        let inputs = ids[..ids.len() - 1].to_vec();
        let targets = weights
            .iter()
            .map(|&(p, w, m)| TargetSpec { pos: p - 1, target: ids[p], weight: w, modality: m })
            .collect();
        TrainExample { inputs, targets }
    }

    fn batch() -> Vec<TrainExample> {
        vec![
            example(
                &[1, 4, 2, 7, 3, 8],
                &[(2, 1.0, Modality::Action), (4, 0.5, Modality::Vision), (5, 1.0, Modality::Action)],
            ),
            example(&[0, 5, 5, 6], &[(1, 0.5, Modality::Vision), (3, 1.0, Modality::Action)]),
        ]
    }

    fn perturbed(params: &ModelParams<f64>, scale: f64) -> ModelParams<f64> {
        // Larger weights than the default init so every path carries signal.
        let mut p = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in p.data_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
        p
    }

    #[test]
    fn gradient_matches_central_differences() {
        let params = perturbed(&ModelParams::<f64>::init(cfg(), 3).unwrap(), 0.6);
        let b = batch();
        let (_, grads) = loss_and_grad(&params, &b, None).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &g) in grads.iter().enumerate() {
            let mut p = params.clone();
            p.data_mut()[i] += h;
            let up = eval_loss(&p, &b).unwrap().loss;
            p.data_mut()[i] -= 2.0 * h;
            let down = eval_loss(&p, &b).unwrap().loss;
            let num = (up - down) / (2.0 * h);
            let err = (num - g).abs() / (1e-6 + num.abs().max(g.abs()));
            if num.abs().max(g.abs()) > 1e-7 {
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn dropout_gradient_matches_with_fixed_mask() {
        let mut c = cfg();
        c.dropout = 0.3;
        let params = perturbed(&ModelParams::<f64>::init(c, 4).unwrap(), 0.6);
        let b = batch();
        let lossf = |p: &ModelParams<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            loss_and_grad(p, &b, Some(&mut rng)).unwrap()
        };
        let (_, grads) = lossf(&params);
        let h = 1e-5;
        for i in (0..params.num_params()).step_by(7) {
            let mut p = params.clone();
            p.data_mut()[i] += h;
            let up = lossf(&p).0.loss;
            p.data_mut()[i] -= 2.0 * h;
            let down = lossf(&p).0.loss;
            let num = (up - down) / (2.0 * h);
            assert!((num - grads[i]).abs() < 1e-6 + 1e-4 * num.abs(), "param {i}: {num} vs {}", grads[i]);
        }
    }

    #[test]
    fn batched_equals_individual() {
        let params = ModelParams::<f64>::init(cfg(), 1).unwrap();
        let b = batch();
        let joint = forward_rows(&params, &b);
        for (k, ex) in b.iter().enumerate() {
            let single = forward(&params, &ex.inputs).unwrap();
            for (r, row) in single.rows().into_iter().enumerate() {
                for (a, bb) in row.iter().zip(joint[k].row(r)) {
                    assert!((a - bb).abs() < 1e-12);
                }
            }
        }
    }

    fn forward_rows(params: &ModelParams<f64>, b: &[TrainExample]) -> Vec<Array2<f64>> {
        let seqs: Vec<&[TokenId]> = b.iter().map(|e| e.inputs.as_slice()).collect();
        let cache = run_forward(params, &seqs, None).unwrap();
        let layout = params.layout();
        let head = params.mat(layout.head_w, 8, 9);
        let all = linear(&cache.lnf.view(), head, None);
        cache.spans.iter().map(|&(s, l)| all.slice(s![s..s + l, ..]).to_owned()).collect()
    }

    #[test]
    fn causal() {
        let params = perturbed(&ModelParams::<f64>::init(cfg(), 2).unwrap(), 0.4);
        let a = forward(&params, &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = forward(&params, &[1, 2, 3, 7, 0, 8]).unwrap();
        for r in 0..3 {
            for j in 0..9 {
                assert_eq!(a[[r, j]], b[[r, j]]);
            }
        }
        assert!((0..9).any(|j| a[[3, j]] != b[[3, j]]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = ModelParams::<f32>::init(cfg(), 0).unwrap();
        assert!(forward(&params, &[1, 99]).is_err());
        assert!(matches!(forward(&params, &[1; 11]), Err(Error::InvalidArgument(_))));
        let no_targets = vec![TrainExample { inputs: vec![1, 2], targets: vec![] }];
        assert!(loss_and_grad(&params, &no_targets, None).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_log_v() {
        let mut params = ModelParams::<f64>::init(cfg(), 0).unwrap();
        let layout = params.layout();
        let head = layout.head_w;
        params.data_mut()[head..head + 8 * 9].fill(0.0);
        let r = eval_loss(&params, &batch()).unwrap();
        assert!((r.loss - 9f64.ln()).abs() < 1e-12);
        assert_eq!(r.action_count, 3);
        assert_eq!(r.vision_count, 2);
    }
}
