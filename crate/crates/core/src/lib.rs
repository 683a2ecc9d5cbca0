#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod graph;
pub mod io;
pub mod labeler;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod trainer;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
