//! Volumes, meshes and the conversions between them.

pub mod color;
pub mod grid;
pub mod io;
pub mod marching_cubes;
mod mc_tables;
pub mod mesh;
pub mod sdf;
pub mod shell;

pub use color::build_color_volume;
pub use io::{read_obj, read_ply, read_volume, write_obj, write_ply, write_volume, Volume};
pub use grid::{ColoredPointCloud, DenseVolume, SparseVolume, VolumeSpec, Voxel};
pub use marching_cubes::{marching_cubes_dense, marching_cubes_fn, marching_cubes_sparse};
pub use mesh::TriMesh;
pub use sdf::{compute_sdf_at, compute_sdf_volume, sdf_to_occupancy, MeshSdf};
pub use shell::{shell_iou, shell_iou_sets, subdivide_indices, subdivide_occupancy, Iou};
