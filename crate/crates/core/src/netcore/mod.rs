//! Learnable building blocks: the differentiation tape, dense and Padé
//! networks, parameter storage, the optimizer and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;

pub use mlp::{mlp_forward, pade_forward, Mlp, Pade};
pub use optim::AdamW;
pub use params::{grad, Bound, Gradients, ParamId, ParameterStore};
pub use tape::{Tape, Var};
