//! Spiking transformer with information-retaining token pruning.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod numerics;
pub mod pruning;
pub mod search;
pub mod training;

pub use error::{Error, Result};
