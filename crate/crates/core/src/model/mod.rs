//! Decoder-only causal transformer over the shared vocabulary.
//!
//! Pre-norm blocks (LayerNorm, multi-head causal attention, LayerNorm, GELU
//! MLP), learned positional embeddings, a final LayerNorm and an untied
//! output projection. All parameters live in one flat buffer; [`Layout`]
//! names the slices. Backward passes are written by hand.

mod checkpoint;
mod forward;
mod generate;
mod loss;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use forward::{eval_loss, forward, loss_and_grad, LossReport, TargetSpec, TrainExample};
pub use generate::{generate, generate_until, Decoding, Generation, KvCache};
pub use loss::{log_softmax_row, loss, loss_weighted, loss_with_weights};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2, LinalgScalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Floating point type the model can be instantiated with.
pub trait Real:
    num_traits::Float + LinalgScalar + AddAssign + MulAssign + SubAssign + Send + Sync + Debug + Default + Sum + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
}

impl ModelConfig {
    /// Desk-scale default shape for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 128, n_layers: 4, n_heads: 4, d_ff: 512, max_seq_len: 1024, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size >= 1, "vocab_size must be positive");
        ensure!(self.d_model >= 1 && self.n_heads >= 1, "d_model and n_heads must be positive");
        ensure!(
            self.d_model.is_multiple_of(self.n_heads),
            "d_model {} not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        ensure!(self.n_layers >= 1, "need at least one layer");
        ensure!(self.d_ff >= 1, "d_ff must be positive");
        ensure!(self.max_seq_len >= 1, "max_seq_len must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout {} outside [0, 1)", self.dropout);
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub fcp_w: usize,
    pub fcp_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named slices of the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_w: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, c, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, shape, offset, init });
            offset
        };
        let wte = add("wte".into(), vec![v, c], Init::Normal);
        let wpe = add("wpe".into(), vec![t, c], Init::Normal);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_w: add(p("ln1.w"), vec![c], Init::Ones),
                ln1_b: add(p("ln1.b"), vec![c], Init::Zeros),
                qkv_w: add(p("attn.qkv.w"), vec![c, 3 * c], Init::Normal),
                qkv_b: add(p("attn.qkv.b"), vec![3 * c], Init::Zeros),
                proj_w: add(p("attn.proj.w"), vec![c, c], Init::Normal),
                proj_b: add(p("attn.proj.b"), vec![c], Init::Zeros),
                ln2_w: add(p("ln2.w"), vec![c], Init::Ones),
                ln2_b: add(p("ln2.b"), vec![c], Init::Zeros),
                fc_w: add(p("mlp.fc.w"), vec![c, f], Init::Normal),
                fc_b: add(p("mlp.fc.b"), vec![f], Init::Zeros),
                fcp_w: add(p("mlp.proj.w"), vec![f, c], Init::Normal),
                fcp_b: add(p("mlp.proj.b"), vec![c], Init::Zeros),
            });
        }
        let lnf_w = add("lnf.w".into(), vec![c], Init::Ones);
        let lnf_b = add("lnf.b".into(), vec![c], Init::Zeros);
        let head_w = add("head.w".into(), vec![c, v], Init::Normal);
        Self { wte, wpe, layers, lnf_w, lnf_b, head_w, tensors, total }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.total
    }
}

/// Model weights: configuration plus the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real> {
    pub(crate) cfg: ModelConfig,
    pub(crate) data: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    /// Seeded init: weights ~ N(0, 0.02), biases 0, LayerNorm gains 1.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut data = vec![F::zero(); layout.num_params()];
        for t in layout.tensors() {
            let slot = &mut data[t.offset..t.offset + t.numel()];
            match t.init {
                Init::Normal => slot.iter_mut().for_each(|v| *v = F::of(normal.sample(&mut rng))),
                Init::Ones => slot.fill(F::one()),
                Init::Zeros => {}
            }
        }
        Ok(Self { cfg, data })
    }

    pub fn from_parts(cfg: ModelConfig, data: Vec<F>) -> Result<Self> {
        cfg.validate()?;
        let n = Layout::new(&cfg).num_params();
        ensure!(data.len() == n, "parameter buffer has {} values, config needs {n}", data.len());
        ensure!(data.iter().all(|v| v.is_finite()), "non-finite parameter");
        Ok(Self { cfg, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams { cfg: self.cfg, data: self.data.iter().map(|v| G::of(v.as_f64())).collect() }
    }

    pub(crate) fn mat(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        mat(&self.data, offset, rows, cols)
    }

    pub(crate) fn vec(&self, offset: usize, len: usize) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[offset..offset + len])
    }
}

pub(crate) fn mat<F: Real>(data: &[F], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), &data[offset..offset + rows * cols]).expect("layout slice")
}

pub(crate) fn mat_mut<F: Real>(data: &mut [F], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), &mut data[offset..offset + rows * cols]).expect("layout slice")
}

/// Closed-form parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (v, c, f, t, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len, cfg.n_layers);
    v * c + t * c + l * (4 * c + 3 * c * c + 3 * c + c * c + c + c * f + f + f * c + c) + 2 * c + c * v
}
