//! Network building blocks: layers, the multi-view condition and the UNet.

pub mod condition;
pub mod nn;
pub mod sparse;
pub mod unet;

pub use condition::{
    project_colors, ConditionConfig, ConditionInputs, ConditionMode, ConditionNet, Conditioning, MultiView,
    PROJECTED_COLOR_CHANNELS,
};
pub use sparse::SparseHierarchy;
pub use unet::{Grid, UNet, UNetConfig};
