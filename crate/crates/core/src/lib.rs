//! Tensor mixed effects (TME) models for third-order array data.

pub mod benchmarks;
pub mod error;
pub mod io;
pub mod simlab;
pub mod spd;
pub mod tensor;
pub mod tensor_normal;
pub mod tme;
pub mod tucker;

pub use error::{Result, TmeError};
pub use spd::{spd_project, CovTriple, SpdMatrix};
pub use tensor::{kron, tucker_apply, Mat, Mode, Tensor3};
pub use tensor_normal::TensorNormal3;
