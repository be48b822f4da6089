//! Signed distance from triangle meshes.
//!
//! Unsigned distance comes from a bounding-volume hierarchy over the
//! triangles. The sign is a majority vote over the parity of hit counts of
//! three axis-aligned rays (+x, +y, +z), which tolerates a single grazing ray.

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;

use super::grid::{DenseVolume, VolumeSpec, Voxel};
use super::mesh::TriMesh;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `start..start+count` into `order`. Inner: `start` is the right
    /// child, the left child follows this node.
    start: u32,
    count: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        if !tris.is_empty() {
            build(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Bvh { nodes, order, tris }
    }

    /// Squared distance from `p` to the nearest triangle, and that
    /// triangle's index (lowest index on ties).
    pub fn nearest(&self, p: Vec3) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_dist_sq(p, node.lo, node.hi) > best.0 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.tris[t as usize];
                    let d = (closest_point_on_triangle(p, a, b, c) - p).norm_sq();
                    let t = t as usize;
                    if d < best.0 || (d == best.0 && t < best.1) {
                        best = (d, t);
                    }
                }
            } else {
                let (l, r) = (n + 1, node.start as usize);
                let dl = box_dist_sq(p, self.nodes[l].lo, self.nodes[l].hi);
                let dr = box_dist_sq(p, self.nodes[r].lo, self.nodes[r].hi);
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        Some(best)
    }

    /// Number of triangles hit by the ray `origin + t * axis`, `t > 0`.
    pub fn count_axis_hits(&self, origin: Vec3, axis: usize) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        let mut dir = Vec3::ZERO;
        match axis {
            0 => dir.x = 1.0,
            1 => dir.y = 1.0,
            _ => dir.z = 1.0,
        }
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut hits = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if origin[a1] < node.lo[a1]
                || origin[a1] > node.hi[a1]
                || origin[a2] < node.lo[a2]
                || origin[a2] > node.hi[a2]
                || origin[axis] > node.hi[axis]
            {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let [a, b, c] = self.tris[t as usize];
                    if ray_hits_triangle(origin, dir, a, b, c) {
                        hits += 1;
                    }
                }
            } else {
                stack.push(n + 1);
                stack.push(node.start as usize);
            }
        }
        hits
    }
}

fn build(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let (mut lo, mut hi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
    let (mut clo, mut chi) = (lo, hi);
    for &t in &order[start..end] {
        for v in tris[t as usize] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        clo = clo.min(centroids[t as usize]);
        chi = chi.max(centroids[t as usize]);
    }
    let me = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        start: start as u32,
        count: (end - start) as u32,
    });
    if end - start <= LEAF_SIZE {
        return me;
    }
    let ext = chi - clo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    build(tris, centroids, order, start, mid, nodes);
    let right = build(tris, centroids, order, mid, end, nodes);
    nodes[me].start = right as u32;
    nodes[me].count = 0;
    me
}

fn box_dist_sq(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let d = (lo - p).max(p - hi).max(Vec3::ZERO);
    d.norm_sq()
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Möller–Trumbore, counting hits with `t > 0` and closed barycentric range.
pub fn ray_hits_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> bool {
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(e2);
    let det = e1.dot(h);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = inv * s.dot(h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(e1);
    let v = inv * dir.dot(q);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    inv * e2.dot(q) > 0.0
}

/// Signed distance queries against a watertight mesh.
#[derive(Clone, Debug)]
pub struct MeshSdf {
    bvh: Bvh,
}

impl MeshSdf {
    /// Rejects open meshes, meshes outside the unit cube and zero-area
    /// meshes.
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        mesh.check_watertight()?;
        ensure!(
            mesh.is_normalized(),
            Error::InvalidArgument("mesh is not normalized to [-0.5, 0.5]^3".into())
        );
        ensure!(
            mesh.area() > 0.0,
            Error::Degenerate("mesh has zero surface area".into())
        );
        Ok(MeshSdf {
            bvh: Bvh::new(mesh),
        })
    }

    pub fn unsigned_distance(&self, p: Vec3) -> f64 {
        self.bvh.nearest(p).map_or(f64::INFINITY, |(d, _)| d.sqrt())
    }

    pub fn is_inside(&self, p: Vec3) -> bool {
        let odd = (0..3)
            .filter(|&axis| self.bvh.count_axis_hits(p, axis) % 2 == 1)
            .count();
        odd >= 2
    }

    /// Negative inside.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let d = self.unsigned_distance(p);
        if d > 0.0 && self.is_inside(p) {
            -d
        } else {
            d
        }
    }

    /// Truncated to `±truncation`, then divided by it.
    pub fn normalized(&self, p: Vec3, truncation: f32) -> f32 {
        let t = truncation as f64;
        (self.signed_distance(p).clamp(-t, t) / t) as f32
    }
}

/// One-channel normalized SDF at every cell center.
pub fn compute_sdf_volume(mesh: &TriMesh, spec: &VolumeSpec) -> Result<DenseVolume> {
    spec.validate()?;
    let sdf = MeshSdf::new(mesh)?;
    let data: Vec<f32> = (0..spec.num_cells())
        .into_par_iter()
        .map(|l| sdf.normalized(spec.cell_center(spec.voxel(l)), spec.truncation))
        .collect();
    DenseVolume::from_data(*spec, 1, data)
}

/// Normalized SDF at the centers of `indices` only.
pub fn compute_sdf_at(mesh: &TriMesh, spec: &VolumeSpec, indices: &[Voxel]) -> Result<Vec<f32>> {
    spec.validate()?;
    let sdf = MeshSdf::new(mesh)?;
    Ok(indices
        .par_iter()
        .map(|&v| sdf.normalized(spec.cell_center(v), spec.truncation))
        .collect())
}

/// Binary occupancy shell: 1 where `|sdf| < tau` in world units.
pub fn sdf_to_occupancy(sdf: &DenseVolume, tau: f32) -> Result<DenseVolume> {
    ensure!(
        tau > 0.0 && tau.is_finite(),
        Error::InvalidArgument(format!("occupancy threshold {tau} must be finite and > 0"))
    );
    ensure!(
        sdf.channels == 1,
        Error::ShapeMismatch(format!("expected 1-channel SDF, got {}", sdf.channels))
    );
    let trunc = sdf.spec.truncation as f64;
    let data = sdf
        .data
        .iter()
        .map(|&s| if (s as f64 * trunc).abs() < tau as f64 { 1.0 } else { 0.0 })
        .collect();
    DenseVolume::from_data(sdf.spec, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mesh::{box_mesh, uv_sphere};
    use rand::Rng as _;

    /// Exhaustive oracle: min over all triangles, sign by +x/+y/+z parity
    /// majority counted over all triangles without the hierarchy.
    fn brute_force_sdf(mesh: &TriMesh, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(t);
            best = best.min((closest_point_on_triangle(p, a, b, c) - p).norm());
        }
        let mut odd = 0;
        for axis in 0..3 {
            let mut dir = Vec3::ZERO;
            match axis {
                0 => dir.x = 1.0,
                1 => dir.y = 1.0,
                _ => dir.z = 1.0,
            }
            let hits = (0..mesh.triangles.len())
                .filter(|&t| {
                    let [a, b, c] = mesh.triangle(t);
                    ray_hits_triangle(p, dir, a, b, c)
                })
                .count();
            odd += hits % 2;
        }
        if odd >= 2 {
            -best
        } else {
            best
        }
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.0), a, b, c), a);
        assert_eq!(closest_point_on_triangle(Vec3::new(2.0, -0.5, 0.0), a, b, c), b);
        let p = closest_point_on_triangle(Vec3::new(0.2, 0.2, 3.0), a, b, c);
        assert!((p - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        let e = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((e - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sphere_center_saturates_at_minus_one() {
        let mesh = uv_sphere(Vec3::ZERO, 0.3, 24, 48);
        let spec = VolumeSpec::new(64).unwrap();
        let sdf = MeshSdf::new(&mesh).unwrap();
        assert_eq!(sdf.normalized(Vec3::ZERO, spec.truncation), -1.0);
        assert_eq!(sdf.normalized(Vec3::new(0.49, 0.0, 0.0), spec.truncation), 1.0);
    }

    #[test]
    fn point_on_surface_is_zero() {
        let mesh = box_mesh(Vec3::splat(-0.25), Vec3::splat(0.25));
        let sdf = MeshSdf::new(&mesh).unwrap();
        assert!(sdf.signed_distance(Vec3::new(0.25, 0.1, -0.05)).abs() < 1e-12);
    }

    #[test]
    fn accelerated_matches_exhaustive_oracle() {
        let mesh = uv_sphere(Vec3::new(0.05, -0.02, 0.01), 0.31, 20, 40);
        let sdf = MeshSdf::new(&mesh).unwrap();
        let mut rng = crate::rng::from_seed(11);
        for _ in 0..120 {
            let p = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let fast = sdf.signed_distance(p);
            let slow = brute_force_sdf(&mesh, p);
            assert!((fast - slow).abs() <= 1e-6, "{p:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn sign_inside_and_outside_box() {
        let mesh = box_mesh(Vec3::new(-0.3, -0.2, -0.1), Vec3::new(0.3, 0.2, 0.1));
        let sdf = MeshSdf::new(&mesh).unwrap();
        let mut rng = crate::rng::from_seed(5);
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
            );
            let inside = p.x.abs() < 0.3 && p.y.abs() < 0.2 && p.z.abs() < 0.1;
            let d = sdf.signed_distance(p);
            assert_eq!(d < 0.0, inside, "{p:?} -> {d}");
        }
    }

    #[test]
    fn rejects_open_and_degenerate_meshes() {
        let mut open = box_mesh(Vec3::splat(-0.2), Vec3::splat(0.2));
        open.triangles.pop();
        let spec = VolumeSpec::new(8).unwrap();
        assert!(matches!(
            compute_sdf_volume(&open, &spec),
            Err(Error::NotWatertight(_))
        ));
        let mut flat = box_mesh(Vec3::splat(-0.2), Vec3::splat(0.2));
        for v in &mut flat.vertices {
            *v = Vec3::ZERO;
        }
        assert!(matches!(
            compute_sdf_volume(&flat, &spec),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn occupancy_is_a_thin_shell() {
        let spec = VolumeSpec::new(64).unwrap();
        // Analytic sphere SDF so the shell test is independent of meshing.
        let data = (0..spec.num_cells())
            .map(|l| {
                let d = spec.cell_center(spec.voxel(l)).norm() - 0.3;
                (d.clamp(-(spec.truncation as f64), spec.truncation as f64)
                    / spec.truncation as f64) as f32
            })
            .collect();
        let sdf = DenseVolume::from_data(spec, 1, data).unwrap();
        let occ = sdf_to_occupancy(&sdf, spec.tau).unwrap();
        let vs = spec.voxel_size();
        for l in 0..spec.num_cells() {
            let r = spec.cell_center(spec.voxel(l)).norm();
            let o = occ.data[l];
            if (r - 0.3).abs() < vs - 1e-6 {
                assert_eq!(o, 1.0);
            } else if (r - 0.3).abs() > vs + 1e-6 {
                assert_eq!(o, 0.0);
            }
        }
        // A radial line crosses the shell in one or two cells.
        let along_x: Vec<u32> = (32..64u32)
            .filter(|&i| occ.get(0, [i, 32, 32]) == 1.0)
            .collect();
        assert!((1..=2).contains(&along_x.len()), "{along_x:?}");
        assert_eq!(occ.get(0, [32, 32, 32]), 0.0);
    }

    #[test]
    fn occupancy_edge_cases() {
        let spec = VolumeSpec::new(8).unwrap();
        let far = DenseVolume::filled(spec, 1, 1.0);
        assert_eq!(sdf_to_occupancy(&far, spec.tau).unwrap().count_nonzero(), 0);
        assert!(sdf_to_occupancy(&far, 0.0).is_err());
        assert!(sdf_to_occupancy(&far, f32::INFINITY).is_err());
        // Monotone in tau; a threshold wider than the band marks everything.
        let half = DenseVolume::filled(spec, 1, 0.5);
        let small = sdf_to_occupancy(&half, spec.tau).unwrap().count_nonzero();
        let wide = sdf_to_occupancy(&half, 1.0).unwrap().count_nonzero();
        assert!(small <= wide);
        assert_eq!(wide, spec.num_cells());
    }
}
