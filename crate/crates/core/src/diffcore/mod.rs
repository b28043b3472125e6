//! Minimal reverse-mode differentiation for a fixed computation graph.
//!
//! There is no tape: the network code assembles the graph by hand from the
//! ops in [`ops`] (or the slice kernels in [`kernels`] on hot paths) and runs
//! the matching backward passes in reverse order.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, op_grad_check, relative_error};
pub use ops::{backward, forward, Mode, Op, OpKind, OpRecord};
pub use optim::{sgd_step, SgdConfig};
pub use tensor::{Parameter, Real, Tensor};
