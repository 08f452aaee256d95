//! Tensors, the fixed convolutional operator set, and reverse-mode
//! differentiation with finite-difference verification.

mod gradcheck;
pub mod kernels;
mod ops;
mod real;
mod subnet;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, sample_coords, DEFAULT_FD_EPS};
pub use kernels::{conv2d, leaky_relu};
pub use ops::{Eager, Ops, ParamId};
pub use real::Real;
pub use subnet::{
    subnet_forward, ConvLayer, ConvSubnetParams, SUBNET_IN_CHANNELS, SUBNET_LAYERS,
    SUBNET_OUT_CHANNELS, SUBNET_PARAM_TENSORS,
};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
