//! Camera rig, rasterization and view utilities.

pub mod image;
pub mod io;
pub mod pose;
pub mod raster;
pub mod views;

pub use image::{tile_views, untile_views, RgbImage, BACKGROUND};
pub use pose::{make_pose_rig, perturb_poses, CameraPose, PoseRig, Projection, RigParams};
pub use raster::{pixel_point, rasterize, RenderedView, Shading};
pub use views::{degrade_views, unproject_views};
