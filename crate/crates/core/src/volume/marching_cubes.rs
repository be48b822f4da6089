//! Isosurface extraction on cell-centered grids.
//!
//! Samples live at voxel centers. Every grid is padded with one ring of
//! outside samples so the extracted surface is closed; vertices shared by
//! neighboring cubes are deduplicated per grid edge, which makes the output
//! watertight.

use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;

use super::grid::{DenseVolume, SparseVolume};
use super::mc_tables::TRI_TABLE;
use super::mesh::TriMesh;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Regular lattice of `n^3` samples, x fastest.
struct Lattice {
    n: usize,
    origin: Vec3,
    spacing: f64,
}

impl Lattice {
    fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }

    fn position(&self, l: usize) -> Vec3 {
        let n = self.n;
        let (i, j, k) = (l % n, (l / n) % n, l / (n * n));
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }
}

type ColorFn<'a> = dyn Fn(usize, usize, f64) -> [f32; 3] + 'a;

fn extract(lat: &Lattice, values: &[f32], iso: f32, color: Option<&ColorFn>) -> TriMesh {
    let n = lat.n;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let mut corner_l = [0usize; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    let l = lat.linear(i + off[0], j + off[1], k + off[2]);
                    corner_l[c] = l;
                    if values[l] < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut t = 0;
                while t + 2 < 16 && row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for (slot, &e) in tri.iter_mut().zip(&row[t..t + 3]) {
                        let [c0, c1] = EDGES[e as usize];
                        let (l0, l1) = (corner_l[c0].min(corner_l[c1]), corner_l[c0].max(corner_l[c1]));
                        let axis = match l1 - l0 {
                            1 => 0u64,
                            d if d == n => 1,
                            _ => 2,
                        };
                        let key = l0 as u64 * 3 + axis;
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let (v0, v1) = (values[l0], values[l1]);
                            let tt = if v1 != v0 {
                                ((iso - v0) as f64 / (v1 - v0) as f64).clamp(0.0, 1.0)
                            } else {
                                0.5
                            };
                            vertices.push(lat.position(l0).lerp(lat.position(l1), tt));
                            if let Some(f) = color {
                                colors.push(f(l0, l1, tt));
                            }
                            (vertices.len() - 1) as u32
                        });
                    }
                    // Table winding faces the inside; flip so normals point
                    // toward increasing values.
                    triangles.push([tri[0], tri[2], tri[1]]);
                    t += 3;
                }
            }
        }
    }
    let mesh = TriMesh::new(vertices, triangles);
    if color.is_some() {
        mesh.with_colors(colors)
    } else {
        mesh
    }
}

fn lerp_color(a: [f32; 3], b: [f32; 3], t: f64) -> [f32; 3] {
    let t = t as f32;
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * t).clamp(0.0, 1.0))
}

/// Extracts the `iso` level set of channel 0. When the volume has at least 4
/// channels, channels 1..4 are read as RGB in `[0, 1]` and interpolated to
/// the vertices. Outside the grid the field takes `pad`.
pub fn marching_cubes_dense(vol: &DenseVolume, iso: f32, pad: f32) -> Result<TriMesh> {
    ensure!(
        pad > iso,
        Error::InvalidArgument(format!("padding {pad} must lie outside the iso level {iso}"))
    );
    let r = vol.spec.resolution;
    let n = r + 2;
    let lat = Lattice {
        n,
        origin: vol.spec.cell_center([0, 0, 0]) - Vec3::splat(vol.spec.voxel_size()),
        spacing: vol.spec.voxel_size(),
    };
    let mut values = vec![pad; n * n * n];
    let mut rgb: Vec<Option<[f32; 3]>> = vec![None; if vol.channels >= 4 { n * n * n } else { 0 }];
    for l in 0..vol.spec.num_cells() {
        let [i, j, k] = vol.spec.voxel(l);
        let pl = lat.linear(i as usize + 1, j as usize + 1, k as usize + 1);
        values[pl] = vol.data[l];
        if !rgb.is_empty() {
            let nc = vol.spec.num_cells();
            rgb[pl] = Some([1, 2, 3].map(|c| vol.data[c * nc + l]));
        }
    }
    Ok(extract_with_colors(&lat, &values, iso, &rgb))
}

/// Sparse variant: cells outside the index set (and outside the grid) take
/// `pad`, which should be `+truncation` in the units of channel 0.
pub fn marching_cubes_sparse(vol: &SparseVolume, iso: f32, pad: f32) -> Result<TriMesh> {
    ensure!(
        pad > iso,
        Error::InvalidArgument(format!("padding {pad} must lie outside the iso level {iso}"))
    );
    let r = vol.spec.resolution;
    let n = r + 2;
    let lat = Lattice {
        n,
        origin: vol.spec.cell_center([0, 0, 0]) - Vec3::splat(vol.spec.voxel_size()),
        spacing: vol.spec.voxel_size(),
    };
    let mut values = vec![pad; n * n * n];
    let mut rgb: Vec<Option<[f32; 3]>> = vec![None; if vol.width >= 4 { n * n * n } else { 0 }];
    for (idx, &[i, j, k]) in vol.indices.iter().enumerate() {
        let pl = lat.linear(i as usize + 1, j as usize + 1, k as usize + 1);
        let v = vol.value(idx);
        values[pl] = v[0];
        if !rgb.is_empty() {
            rgb[pl] = Some([v[1], v[2], v[3]]);
        }
    }
    Ok(extract_with_colors(&lat, &values, iso, &rgb))
}

fn extract_with_colors(lat: &Lattice, values: &[f32], iso: f32, rgb: &[Option<[f32; 3]>]) -> TriMesh {
    if rgb.is_empty() {
        return extract(lat, values, iso, None);
    }
    // An edge endpoint without a color (padding) defers to the other one.
    let color = |l0: usize, l1: usize, t: f64| match (rgb[l0], rgb[l1]) {
        (Some(a), Some(b)) => lerp_color(a, b, t),
        (Some(a), None) => lerp_color(a, a, 0.0),
        (None, Some(b)) => lerp_color(b, b, 0.0),
        (None, None) => [0.0; 3],
    };
    extract(lat, values, iso, Some(&color))
}

/// Extracts the zero level set of an analytic field sampled on `res^3` cell
/// centers over `[-0.5, 0.5]^3`, coloring vertices with `color`.
pub fn marching_cubes_fn(
    res: usize,
    field: impl Fn(Vec3) -> f32 + Sync,
    color: impl Fn(Vec3) -> [f32; 3],
    pad: f32,
) -> TriMesh {
    use rayon::prelude::*;
    let n = res + 2;
    let spacing = 1.0 / res as f64;
    let lat = Lattice {
        n,
        origin: Vec3::splat(-0.5 + 0.5 * spacing - spacing),
        spacing,
    };
    let values: Vec<f32> = (0..n * n * n)
        .into_par_iter()
        .map(|l| {
            let (i, j, k) = (l % n, (l / n) % n, l / (n * n));
            if i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1 {
                pad
            } else {
                field(lat.position(l))
            }
        })
        .collect();
    let vcolor = |l0: usize, l1: usize, t: f64| color(lat.position(l0).lerp(lat.position(l1), t));
    extract(&lat, &values, 0.0, Some(&vcolor))
}
