//! Deterministic tensor math for small vision models on a single core:
//! dense/conv kernels with fixed accumulation order, a reverse-mode tape,
//! Adam, binary checkpoints, and a central-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::CheckpointError;
pub use gradcheck::{gradient_check, DiffFn, GradCheckConfig, GradCheckReport, TapeFn};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use param::{NamedParamSet, ParamEntry};
pub use scalar::Scalar;
pub use tape::{Grads, ParamVars, Tape, Var};
pub use tensor::{Tensor, TensorError};
