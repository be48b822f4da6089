use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::spatial::KdTree;

use super::grid::{check_sorted_unique, ColoredPointCloud, SparseVolume, VolumeSpec, Voxel};

/// Per occupied voxel, the color of the nearest cloud point to the cell
/// center, remapped from `[0, 1]` to `[-1, 1]`.
pub fn build_color_volume(
    cloud: &ColoredPointCloud,
    occ_indices: &[Voxel],
    spec: &VolumeSpec,
) -> Result<SparseVolume> {
    ensure!(
        !cloud.is_empty(),
        Error::InvalidArgument("cannot build a color volume from an empty cloud".into())
    );
    ensure!(
        cloud.points.len() == cloud.colors.len(),
        Error::ShapeMismatch("point and color counts differ".into())
    );
    check_sorted_unique(occ_indices)?;
    let tree = KdTree::new(&cloud.points);
    let values: Vec<f32> = occ_indices
        .par_iter()
        .flat_map_iter(|&v| {
            let (_, nearest) = tree
                .nearest(spec.cell_center(v))
                .expect("non-empty tree");
            cloud.colors[nearest].map(|c| 2.0 * c - 1.0)
        })
        .collect();
    SparseVolume::new(*spec, occ_indices.to_vec(), 3, values)
}
