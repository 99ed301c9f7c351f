//! Unified discrete-token modeling of vision, language and action.
//!
//! All three modalities share one token-ID space ([`vocab`]). Actions go
//! through a DCT + BPE codec ([`action_codec`]), images through a patch-level
//! vector quantizer ([`vision_codec`]). [`sequence`] packs them into
//! interleaved causal sequences with per-task loss masks, [`model`] is a small
//! decoder-only transformer, and [`train`] runs the two-stage recipe.
//! [`env`] and [`rollout`] provide a synthetic manipulation benchmark and the
//! closed-loop evaluation and ablation harness.

pub mod action_codec;
pub mod codecs;
pub mod env;
pub mod error;
pub mod model;
pub mod rollout;
pub mod sequence;
pub mod train;
pub mod vision_codec;
pub mod vocab;

pub use error::{Error, Result};
