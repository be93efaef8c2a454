//! Dense tensors with reverse-mode differentiation and the small operator
//! set the detector needs: dense and depthwise convolution, batch
//! normalization, ReLU6, sigmoid, residual add, nearest upsampling, channel
//! concatenation, and the loss primitives.

mod conv;
pub mod gradcheck;
mod losses;
mod norm;
mod optim;
mod param;
pub mod reference;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use losses::LineErrMode;
pub use norm::{RunningStats, BN_EPS, BN_MOMENTUM};
pub use optim::sgd_momentum_step;
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use losses::line_err_value;
pub(crate) use tape::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0:?} has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}
