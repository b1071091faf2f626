//! Mixture-of-experts prompt tuning on frozen transformer backbones.
//!
//! Several frozen transformer "experts" each receive learnable prompt tokens.
//! A shared dispatcher layer computes dynamic, row-stochastic dispatching
//! weights per expert and fuses all experts' prompt tokens into integrated
//! prompt tokens at every prompted layer. Only the prompt banks, the
//! dispatcher, and the classification head train; every backbone stays frozen.
//!
//! Module map:
//! - [`numerics`]: dense tensors, a seedable RNG, reverse-mode autodiff, and
//!   a finite-difference gradient checker.
//! - [`backbone`]: frozen transformer experts and the `PMWA` weight archive.
//! - [`prompting`]: prompt-token banks and the single-expert VPT baselines.
//! - [`dispatch`]: dispatching weights, token fusion, the MoE-MLP dispatcher
//!   variant, and dispatch traces.
//! - [`model`]: the assembled multi-expert model and its forward pass.
//! - [`harness`]: AdamW, synthetic datasets, training/eval loops, IDX
//!   ingestion, and the command-line interface.

pub mod backbone;
pub mod dispatch;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod prompting;

mod error;

pub use error::{Error, Result};
