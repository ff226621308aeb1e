#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autograd;
pub mod data;
pub mod gradcheck;
pub mod kernels;
pub mod latent;
pub mod loss;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use tensor::{Tensor, TensorError};
