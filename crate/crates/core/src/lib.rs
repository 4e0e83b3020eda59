//! Edge-seeded, query-efficient black-box attack against interpretable
//! micro-CNN classifiers, with the tooling to evaluate it.
//!
//! A white-box source model and its interpreter produce edge-restricted PGD
//! seeds; a microbial genetic algorithm then evolves those seeds using only
//! probability queries against a black-box target.

pub mod dataset;
pub mod defenses;
pub mod edge_seed;
pub mod error;
pub mod harness;
pub mod interpreters;
pub mod mga;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod target;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
