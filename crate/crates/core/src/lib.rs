//! Attention-based neural machine translation at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, vocabulary and batching, the bidirectional-GRU encoder with an
//! attentive GRU decoder, maximum-likelihood / minimum-risk /
//! semi-supervised training with SGD, AdaDelta and a NaN-safe Adam, beam
//! search with unknown-word replacement, BLEU, and layer-wise relevance
//! propagation for inspecting trained models.

pub mod data;
pub mod decode;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{NmtError, Result};
pub use graph::{Graph, Var};
pub use tensor::{clip_global_norm, forward_op, Op, Tensor};
