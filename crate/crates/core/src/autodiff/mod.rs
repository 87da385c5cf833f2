//! Minimal reverse-mode differentiation over a fixed op vocabulary.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub(crate) mod kernels;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, GradEntry};
pub use graph::{Graph, OpKind, Param, ParamRegistry, ParamRole, ValueId};
pub use init::init_params;
pub use tensor::Tensor;
