//! Minimal reverse-mode differentiation over `f32` tensors, covering the
//! operations a Conv-4 embedding and prototype losses need.

pub mod checkpoint;
pub mod finite_diff;
mod kernels;
pub mod reference;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use finite_diff::{finite_diff_at, finite_diff_gradient, GradTolerance};
pub use tape::{Mode, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
