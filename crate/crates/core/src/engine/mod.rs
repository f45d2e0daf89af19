//! Tensor operations and reverse-mode differentiation.

pub mod conv;
pub mod kernels;
pub mod tape;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use kernels::IGNORE_INDEX;
pub use tape::{BnHyper, Mode, RunningStats, Tape, Var};
