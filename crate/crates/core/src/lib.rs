//! Open-world recognition over precomputed feature embeddings.
//!
//! A phase of the loop selects a fixed budget of diverse exemplars per known
//! class, fits a closed-set classifier on them, rejects low-confidence stream
//! instances as unknown, clusters the rejected instances together with the
//! exemplars to discover new categories, has them annotated, and merges the
//! result back into the exemplar buffer for the next phase.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod classify;
pub mod discover;
pub mod error;
pub mod exemplar;
pub mod ingest;
pub mod metrics;
pub mod osr;
pub mod pipeline;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
pub use rng::Rng;
pub use types::{
    argmax, softmax, squared_euclidean, ClassId, ClassRegistry, FeatureSet, OpenSetPrediction,
    PartitionResult, UNKNOWN,
};
