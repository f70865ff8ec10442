#![no_std]
extern crate alloc;

pub mod autograd;
pub mod bridging;
pub mod ckd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::{DetRng, RngState};
pub use tensor::Tensor;
