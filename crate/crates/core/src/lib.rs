pub mod config;
pub mod error;
pub mod geometry;
pub mod hyperstack;
pub mod invariants;
pub mod kernel;
pub mod multiscale;
pub mod netcore;
pub mod pipeline;
pub mod rng;
pub mod sum;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
