//! Minimal reverse-mode differentiation over the operators the models use,
//! plus parameter storage and Adam.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tape;

pub use ops::{timestep_embedding, Layout, Rulebook, Stencils};
pub use params::{AdamConfig, Bound, ParameterStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Tensor, Var};
