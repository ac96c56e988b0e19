//! Dense tensors and reverse-mode differentiation over the operation set the
//! separation model needs.

pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub(crate) use graph::Function;
pub use graph::Var;
pub use ops::NormKind;
pub(crate) use tensor::gemm;
pub use tensor::Tensor;
