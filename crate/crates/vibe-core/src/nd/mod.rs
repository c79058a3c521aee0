//! Minimal dense-tensor stack: typed scalars, row-major tensors, hand-rolled
//! compute kernels, a reverse-mode tape, parameter sets, and a
//! finite-difference gradient checker.

mod gradcheck;
mod kernels;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use kernels::{conv_geometry, linear_table, ConvGeom, LinSample, PadMode};
pub use param::{clip_global_norm, ParamId, ParamSet};
pub use scalar::{Dtype, Scalar};
pub use tape::{broadcast_shapes, Tape, Var};
pub use tensor::{element_count, strides_for, Tensor};
