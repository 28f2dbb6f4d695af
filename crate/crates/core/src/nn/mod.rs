//! Minimal 3D layer library with explicit forward caches and hand-written
//! backward passes.

pub mod blocks;
mod conv;
pub mod gradcheck;
mod norm;
pub mod ops;
mod params;
mod real;
mod sgd;
mod tensor;

pub use blocks::{ConvBnRelu, DoubleConv, ResBlock};
pub use conv::Conv3d;
pub use norm::{BatchNorm3d, BnCache};
pub use ops::Linear;
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use sgd::Sgd;
pub use tensor::Tensor;
