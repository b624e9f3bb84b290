//! Decoupled visual sparsity for vision-language-model inference, at desk scale.
//!
//! The pipeline splits visual compression across the two inference stages:
//! query-agnostic token pruning at prefill (salience from encoder self-attention)
//! and query-aware retrieval over the KV cache at decode, with multi-turn cache
//! eviction and an analytic FLOP/byte cost model. Everything is deterministic:
//! a seeded toy VLM stands in for real checkpoints so that oracle-equivalence
//! and invariant suites can pin the math down to tight tolerances.

pub mod analysis;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod niah;
pub mod report;
pub mod retrieval;
pub mod rng;
pub mod rope;
pub mod ropemap;
pub mod salience;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
