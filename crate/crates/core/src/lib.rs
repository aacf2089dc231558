// Tape ops mirror operator names but return Result; NaN-rejecting checks read as `!(x > 0.0)`.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod losses;
pub mod mae;
pub mod optim;
pub mod par;
pub mod params;
pub mod pgm;
pub mod seed;
pub mod sim;
pub mod swin;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
