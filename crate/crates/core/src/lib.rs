//! Training-free KV-cache compression for chunked autoregressive attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: frame tensors, the per-layer KV cache and the seeded synthetic
//!   latent stream.
//! - [`rope`]: causal temporal rotary embeddings and the closed-form temporal
//!   logit as a function of relative frame distance.
//! - [`scoring`]: grouped attention scores, key-diversity scores, fusion and
//!   budget-constrained Top-K history selection per query frame and head.
//! - [`importance`]: masked-head rollouts scored with a distribution-matching
//!   loss, normalisation and the curved per-head budget mapping.
//! - [`packed`]: variable-length packing with cumulative boundaries, the
//!   segment-wise executor, the dense masked oracle and scatter-back.
//! - [`cost`]: frame-level attention cost and packing-memory estimator.
//! - [`rollout`]: the synthetic chunked rollout driver and cache policies.
//! - [`cli`]: the `focused-kv` command-line front end.

pub mod cli;
pub mod config;
pub mod cost;
pub mod error;
pub mod importance;
pub mod model;
pub mod packed;
pub mod rollout;
pub mod rope;
pub mod scoring;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use importance::{HeadBudgetTable, ImportanceTable};
pub use model::{FrameTensor, KvCache, LatentWindow, ModelShape};
pub use packed::PackedBatch;
pub use rollout::{Policy, RolloutTrace};
pub use rope::RopeSpec;
pub use scoring::{ScoreKind, ScoreTensor, SelectionMask};
