//! Dense tensors and a reverse-mode tape over exactly the primitives the
//! multimodal encoder needs.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two instantiations.

mod error;
pub mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::ParamTree;
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::{top_k, Tensor, TopK};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamTree32 = ParamTree<f32>;
pub type ParamTree64 = ParamTree<f64>;
