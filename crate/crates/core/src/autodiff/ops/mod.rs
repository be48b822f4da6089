//! Operators recorded on the tape. Each file adds methods to
//! [`Tape`](super::Tape).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod reduce;
pub mod sample;
pub mod sparse;

pub use elementwise::{timestep_embedding, Layout};
pub use sample::Stencils;
pub use sparse::Rulebook;
