//! In-context-learning pipeline for compositional visual question answering.
//!
//! The pipeline answers a compositional question about an image in three
//! moves: sample demonstrations close to the query (a fixed query-generic
//! pool plus query-specific neighbors retrieved by embedding similarity),
//! decompose the question into simpler subquestions ordered by difficulty,
//! and answer the subquestions sequentially, feeding each answer back into
//! the context before the final one is asked.  Demonstrations are annotated
//! the same way ahead of time: their subquestions are pseudo-labeled by the
//! model itself, with an adjustment loop that restarts labeling whenever the
//! terminal label disagrees with the known ground truth.
//!
//! Everything is model-agnostic: backends implement [`gateway::ModelBackend`]
//! and the crate ships a deterministic scene-graph oracle so the whole loop
//! can be exercised and measured without network access.

pub mod dataset;
pub mod decompose;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod generator;
pub mod index;
mod net;
pub mod normalize;
pub mod pipeline;
pub mod pool;
pub mod prompt;
pub mod pseudolabel;
pub mod scene;

pub use error::{Error, Result};
