//! Attention context-aware embeddings for context-aware person retrieval.
//!
//! The crate consumes per-image sets of appearance features, aggregates them
//! within and across an image pair with attention, and uses the resulting
//! contextual embeddings to re-score a gallery. Training runs the head with an
//! OIM objective and an image memory bank that supplies partner-image features.

pub mod bank;
pub mod bench;
pub mod error;
pub mod eval;
pub mod exec;
pub mod format;
pub mod grad;
pub mod head;
pub mod oim;
pub mod rerank;
pub mod seed;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
