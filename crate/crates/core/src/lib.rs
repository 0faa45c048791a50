//! Causal interaction trees: recursive partitioning of a covariate space into
//! subgroups with different treatment effects, estimated from observational
//! data with inverse probability weighting, the g-formula or a doubly robust
//! estimator.

pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod select;
pub mod simulate;
pub mod tree;

pub use error::{CitError, ErrorClass, Result};
