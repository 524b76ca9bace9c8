//! Generalized tensor networks: shallow (CP-form) and recurrent (TT-form)
//! score functions with an associative nonlinearity in place of
//! multiplication, their grid tensors, the constructive universality and
//! expressivity results, and matricization-rank analysis.

// validation uses `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod constructions;
mod error;
pub mod grid;
pub mod io;
pub mod networks;
pub mod tensor;
pub mod trainer;
pub mod xi;

#[cfg(test)]
mod proptests;

pub use error::{Error, Result};
pub use networks::{FeatureMap, Network, RnnCell, RnnNet, ShallowNet, Token};
pub use xi::Xi;
