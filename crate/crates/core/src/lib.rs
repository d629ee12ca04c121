//! Language bottleneck models for knowledge tracing.
//!
//! A student's interaction history is compressed by an encoder into a short
//! natural-language summary; a decoder then predicts future answers from the
//! summary alone. This crate holds the pieces needed to study that setup at
//! desk scale:
//!
//! - [`sim`]: synthetic arithmetic students with misconceptions
//! - [`ingest`]: external interaction logs and single-session filtering
//! - [`gateway`]: completion backends (HTTP, replay, oracle)
//! - [`pipeline`]: splits, encoding, decoding and direct prompting
//! - [`grpo`]: rewards, group-relative advantages and a toy trainable policy
//! - [`bkt`]: Bayesian Knowledge Tracing baseline
//! - [`harness`]: config-driven experiments and reports
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is on (the default) and plain iteration otherwise.

pub mod bkt;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gateway;
pub mod grpo;
pub mod harness;
pub mod ingest;
pub mod jsonl;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod sim;
pub mod summary;

pub use error::{Error, Result};
