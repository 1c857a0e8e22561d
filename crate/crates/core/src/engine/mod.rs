//! Deterministic rank-4 tensor engine: kernels, reverse-mode tape, Adam and
//! finite-difference gradient checking.

mod adam;
pub mod gradcheck;
pub mod ops;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{gradcheck, GradcheckReport, Probe};
pub use ops::{bce_with_logits, sigmoid, ConvGeom, Padding};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use scalar::Scalar;
#[doc(hidden)]
pub use tape::inject_backward_fault;
pub use tape::{Gradients, OpCost, OpKind, Tape, Var};
pub use tensor::{Shape4, Tensor4};
