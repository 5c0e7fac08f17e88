//! Deterministic CPU engine for a small multi-view vision-language model,
//! with the three inference shortcuts it is built to measure: text-driven
//! patch selection before the vision encoder, visual token pruning before
//! prefill, and draft-then-verify speculative decoding.
//!
//! Every stage counts its multiply-adds, and [`pipeline::cost`] turns those
//! counters into modeled latency on the reference platform. The runnable
//! programs under `examples/` walk through each stage.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod llm;
pub mod nn;
pub mod patchsel;
pub mod pipeline;
pub mod specdec;
pub mod toksel;
pub mod verify;
pub mod vision;

pub use error::{Error, Result};
