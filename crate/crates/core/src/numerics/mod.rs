//! Deterministic tensor arithmetic, reverse-mode differentiation and AdamW.

mod adamw;
mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod ops;
mod scalar;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState, StepStats};
pub use gradcheck::{
    grad_check, linear_micro_check, primitive_suite, relative_error, GradCheckOptions, GradCheckReport, GroupReport,
    LINEAR_TOL, PRIMITIVE_TOL,
};
pub use kernels::{AttnShape, GeluKind};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
