//! Parameter-efficient cross-modal retrieval on a frozen dual encoder.
//!
//! The library trains small bottleneck adapters — organized as a sparsely
//! routed mixture of experts with an optional domain-conditioned router —
//! on top of a frozen, randomly initialized two-branch transformer, using a
//! similarity-distribution matching objective plus a load-balance penalty.
//! Everything runs on a self-contained reverse-mode autodiff tape in `f64`.
//!
//! Module map:
//! - [`tensor`]: tape autodiff engine (ops, backward, top-k selection)
//! - [`gradcheck`]: finite-difference gradient verification
//! - [`params`]: named parameter storage shared by both encoder branches
//! - [`backbone`]: frozen dual-encoder transformer (image + text branches)
//! - [`adapter`]: bottleneck experts, sparse router, mixture forward,
//!   load-balance penalty, parameter/FLOP accounting
//! - [`objectives`]: similarity-distribution matching losses and the total
//!   training objective
//! - [`data`]: synthetic attribute-grid image/caption benchmark
//! - [`metrics`]: retrieval metrics (rank-at-k, mean average precision)
//! - [`harness`]: training loop, checkpointing, evaluation, experiment
//!   suites, heatmap export

pub mod adapter;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{topk_indices, Tape, Tensor, TensorId};
