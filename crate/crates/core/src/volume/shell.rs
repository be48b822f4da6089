use crate::error::{ensure, Error, Result};

use super::grid::{DenseVolume, Voxel};

/// Children at twice the resolution of every occupied voxel, sorted.
pub fn subdivide_occupancy(occ: &DenseVolume) -> Vec<Voxel> {
    subdivide_indices(&occ.nonzero_voxels())
}

/// Eight children `(2i+a, 2j+b, 2k+c)` per voxel. Input must be sorted and
/// unique; the output then is too.
pub fn subdivide_indices(parents: &[Voxel]) -> Vec<Voxel> {
    let mut out = Vec::with_capacity(parents.len() * 8);
    for &[i, j, k] in parents {
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    out.push([2 * i + a, 2 * j + b, 2 * k + c]);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Intersection-over-union of two binary sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Both sets empty; `value` is then defined as 1.
    pub degenerate: bool,
}

/// IoU of two sorted unique voxel sets.
pub fn shell_iou_sets(a: &[Voxel], b: &[Voxel]) -> Iou {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    iou_from_counts(inter, a.len() + b.len() - inter)
}

/// IoU of two binary dense volumes at the same resolution.
pub fn shell_iou(a: &DenseVolume, b: &DenseVolume) -> Result<Iou> {
    ensure!(
        a.spec.resolution == b.spec.resolution && a.channels == 1 && b.channels == 1,
        Error::ShapeMismatch(format!(
            "IoU needs matching 1-channel volumes, got {}^3x{} and {}^3x{}",
            a.spec.resolution, a.channels, b.spec.resolution, b.channels
        ))
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(iou_from_counts(inter, union))
}

fn iou_from_counts(inter: usize, union: usize) -> Iou {
    if union == 0 {
        Iou {
            value: 1.0,
            degenerate: true,
        }
    } else {
        Iou {
            value: inter as f64 / union as f64,
            degenerate: false,
        }
    }
}
