//! Minimal neural-network toolkit: reverse-mode tape, layers, optimizers,
//! checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;

pub use layers::{Activation, LayerNormParams, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use tape::{Grads, Mat, ParamId, ParamSet, Tape, Var};
