//! Minimal reverse-mode autodiff, parameter storage and optimizers.

pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use optim::{sgd_step, Adam, AdamConfig};
pub use params::{normal, uniform, xavier, zeros, Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, softmax_in_place, Tape, Var};
