//! Knowledge selection and exploitation for discriminative recommenders.
//!
//! This crate implements a pipeline that injects pre-encoded LLM knowledge
//! into CTR-style models:
//!
//! - [`schema`] / [`synthetic`] — feature schemas, interaction-log ingestion,
//!   history construction, chronological splits, and a planted-signal
//!   synthetic generator for desk-scale experiments.
//! - [`knowledge`] — the on-disk knowledge pack, per-sample assembly of the
//!   knowledge matrix, and chunk partitioning.
//! - [`esfnet`] — chunk-gated knowledge selection: a gate neural unit assigns
//!   each knowledge chunk an adaptive weight in `(0, kappa)`.
//! - [`esa`] — embedding-space alignment: per-field refinement, cross
//!   attention with feature-derived queries, and self-attention fusion.
//! - [`backbones`] — embedding layer, MLP / DeepFM-lite / DIN-lite backbones,
//!   trunk decomposition, and prediction heads.
//! - [`training`] — the three training strategies, AUC / LogLoss metrics,
//!   and checkpointing.
//! - [`experiments`] — run orchestration, ablations, diagnostics exports, and
//!   the dataset cache used by the CLI.
//! - [`tensor`] — the reverse-mode autodiff tape the model modules build on.

pub mod backbones;
pub mod error;
pub mod esa;
pub mod esfnet;
pub mod experiments;
pub mod knowledge;
pub mod schema;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{KserError, Result};
