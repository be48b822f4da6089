//! Multi-view conditioned two-stage volumetric diffusion: condition views in,
//! textured triangle mesh out.

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod math;
pub mod model;
pub mod rng;
pub mod spatial;
pub mod texture;
pub mod volume;

pub use error::{Error, Result};
pub use math::{Mat3, Vec3};
pub use volume::{DenseVolume, SparseVolume, TriMesh, VolumeSpec};
