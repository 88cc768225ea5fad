//! Late-interaction passage retrieval over bags of per-token embeddings:
//! MaxSim scoring, offline multi-vector indexing, IVF-PQ candidate
//! generation, two-stage retrieval, and IR evaluation.

pub mod ann;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod indexer;
pub mod retrieval;
pub mod scoring;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
