//! Quantized pruning for transformer KV caches.
//!
//! Prefill-time token eviction ([`prune`]) composed with group-wise low-bit
//! quantization ([`quant`]) of the surviving keys and values, under
//! per-layer token/precision plans ([`budget`]). The [`cache`] module holds
//! the compressed state, and [`model`] is an attention-only decoder that
//! runs prefill and decode through it.

pub mod budget;
pub mod cache;
mod codec;
pub mod error;
pub mod model;
pub mod prune;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
