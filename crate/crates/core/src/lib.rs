//! Graph convolutional networks with learnable, beta-Bernoulli distributed
//! edge drop rates.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command line live in the `gdc` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod masks;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use graph::{EdgeSet, PreparedGraph, SparseMatrix};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
