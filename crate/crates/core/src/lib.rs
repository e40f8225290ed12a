//! Representation-geometry and visual-depth experiments on a deterministic
//! toy vision-language decoder.
//!
//! The crate bundles:
//!
//! - [`numerics`]: dense matrices, a Jacobi eigensolver, softmax, a seeded
//!   generator;
//! - [`model`]: the toy decoder with per-layer capture, KV caching,
//!   truncation and a hand-written backward pass;
//! - [`repr_metrics`]: matrix entropy, effective rank, TwoNN intrinsic
//!   dimension and trajectory curvature;
//! - [`intervention`]: hybrid layer substitution and image-token truncation
//!   sweeps;
//! - [`decoding`]: greedy, beam, nucleus, top-k and temperature decoding plus
//!   cross-strategy variability;
//! - [`eval_metrics`]: exact match, Index+Answer, hashed-embedding similarity,
//!   BLEU, ROUGE and reasoning-chain scoring;
//! - [`flops`]: the analytic prefill/decode cost model;
//! - [`distill`]: low-rank adapters trained to recover a truncated student;
//! - [`trace_io`]: the `HSD1` hidden-state dump format.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod decoding;
pub mod distill;
pub mod error;
pub mod eval_metrics;
pub mod flops;
pub mod intervention;
pub mod model;
pub mod numerics;
pub mod par;
pub mod report;
pub mod repr_metrics;
pub mod trace_io;

pub use error::{LabError, Result};

/// Version string written into every manifest.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
