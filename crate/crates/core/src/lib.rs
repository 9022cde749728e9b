//! Adaptive Hopfield networks: learnable similarity footprints for associative-memory retrieval.
//!
//! A query `x` is scored against every stored pattern, the scores are separated
//! into a probability vector, and the retrieved vector is the corresponding
//! combination of patterns. The adaptive score is a learned linear functional
//! of the sorted, cumulatively summed dimension-wise similarities (the
//! footprint), trained so that retrieval mimics the maximum-a-posteriori
//! origin under a given distribution of corrupted queries.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod data;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod models;
pub mod similarity;
pub mod training;
pub mod types;
pub mod variants;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use types::{
    BaseConfig, BaseKind, MemoryMatrix, QueryVector, SeparationKind, SquareMatrix, Trajectory, UMode,
    VariantKind, VariantSample, VariantSpec, WeightSet,
};
