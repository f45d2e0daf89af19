#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
