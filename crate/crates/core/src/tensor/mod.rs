//! Dense tensors, reverse-mode autodiff, Adam and seeded randomness.

mod array;
mod fused;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;

pub use array::{matmul, Tensor};
pub use gradcheck::{grad_check, GRAD_FLOOR};
pub use optim::Adam;
pub use params::{init, Checkpoint, CheckpointEntry, ParamId, ParamStore, CHECKPOINT_FORMAT};
pub use rng::RngStream;
pub use tape::{sigmoid, Gradients, Tape, Var, BCE_EPS};
