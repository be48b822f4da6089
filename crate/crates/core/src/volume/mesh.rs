use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::rng::Rng;

/// Half-width of the cube every normalized mesh fits in.
pub const EXTENT_HALF: f64 = 0.5;

/// Indexed triangle mesh with optional per-vertex RGB colors in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        TriMesh {
            vertices,
            triangles,
            colors: None,
        }
    }

    pub fn with_colors(mut self, colors: Vec<[f32; 3]>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Checks index bounds and color count.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            ensure!(
                tri.iter().all(|&i| (i as usize) < n),
                Error::InvalidArgument(format!("triangle {t} indexes past {n} vertices"))
            );
        }
        if let Some(colors) = &self.colors {
            ensure!(
                colors.len() == n,
                Error::InvalidArgument(format!("{} colors for {n} vertices", colors.len()))
            );
        }
        Ok(())
    }

    /// Every undirected edge must be used by exactly two triangles, once in
    /// each direction.
    pub fn check_watertight(&self) -> Result<()> {
        self.validate()?;
        ensure!(
            !self.triangles.is_empty(),
            Error::NotWatertight("mesh has no triangles".into())
        );
        let mut edges: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                ensure!(
                    a != b,
                    Error::NotWatertight(format!("collapsed edge at vertex {a}"))
                );
                let key = (a.min(b), a.max(b));
                let entry = edges.entry(key).or_insert((0, 0));
                if a < b {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        for (&(a, b), &(fwd, back)) in &edges {
            if fwd + back != 2 {
                return Err(Error::NotWatertight(format!(
                    "edge ({a}, {b}) is shared by {} triangles",
                    fwd + back
                )));
            }
            if fwd != 1 {
                return Err(Error::NotWatertight(format!(
                    "edge ({a}, {b}) has inconsistent orientation"
                )));
            }
        }
        Ok(())
    }

    pub fn is_watertight(&self) -> bool {
        self.check_watertight().is_ok()
    }

    pub fn is_normalized(&self) -> bool {
        self.vertices
            .iter()
            .all(|v| v.abs().max_element() <= EXTENT_HALF + 1e-6)
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }

    /// Centers the bounding box at the origin and scales uniformly so the
    /// largest half-extent equals `half_extent`.
    pub fn normalize(&mut self, half_extent: f64) -> Result<()> {
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| Error::Degenerate("cannot normalize an empty mesh".into()))?;
        let center = (lo + hi) * 0.5;
        let half = ((hi - lo) * 0.5).max_element();
        ensure!(
            half > 0.0,
            Error::Degenerate("mesh has zero extent".into())
        );
        let s = half_extent / half;
        for v in &mut self.vertices {
            *v = (*v - center) * s;
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal (length = 2 × area).
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(c - a)
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| 0.5 * self.face_normal(t).norm())
            .sum()
    }

    /// Signed enclosed volume (positive for outward-facing orientation).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Area-weighted average of incident face normals, unit length.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::ZERO; self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_normal(t);
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        normals.into_iter().map(Vec3::normalized).collect()
    }

    /// Area-weighted uniform surface samples. Returns positions and the
    /// source triangle of each.
    pub fn sample_surface(&self, count: usize, rng: &mut Rng) -> Result<Vec<(Vec3, usize)>> {
        let mut cdf = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += 0.5 * self.face_normal(t).norm();
            cdf.push(total);
        }
        ensure!(
            total > 0.0,
            Error::Degenerate("cannot sample a zero-area surface".into())
        );
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let target = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let [a, b, c] = self.triangle(t);
            out.push((a + (b - a) * u + (c - a) * v, t));
        }
        Ok(out)
    }
}

/// UV sphere, watertight and outward oriented.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriMesh {
    let mut vertices = vec![center + Vec3::new(0.0, 0.0, radius)];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(
                center
                    + Vec3::new(
                        theta.sin() * phi.cos(),
                        theta.sin() * phi.sin(),
                        theta.cos(),
                    ) * radius,
            );
        }
    }
    vertices.push(center - Vec3::new(0.0, 0.0, radius));
    let south = (vertices.len() - 1) as u32;
    let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let mut triangles = Vec::new();
    for s in 0..segments {
        triangles.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b) = (ring(r, s), ring(r, s + 1));
            let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    for s in 0..segments {
        triangles.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    TriMesh::new(vertices, triangles)
}

/// Axis-aligned box with 12 triangles, outward oriented.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let corner = |i: usize| {
        Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    let vertices = (0..8).map(corner).collect();
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let mut triangles = Vec::new();
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    TriMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_watertight_and_outward() {
        let s = uv_sphere(Vec3::ZERO, 0.3, 16, 32);
        s.check_watertight().unwrap();
        assert!(s.signed_volume() > 0.0);
        let b = box_mesh(Vec3::splat(-0.2), Vec3::splat(0.3));
        b.check_watertight().unwrap();
        assert!((b.signed_volume() - 0.125).abs() < 1e-12);
        assert!((b.area() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn open_mesh_is_rejected() {
        let mut b = box_mesh(Vec3::splat(-0.2), Vec3::splat(0.3));
        b.triangles.pop();
        assert!(matches!(b.check_watertight(), Err(Error::NotWatertight(_))));
    }

    #[test]
    fn flipped_face_is_rejected() {
        let mut b = box_mesh(Vec3::splat(-0.2), Vec3::splat(0.3));
        b.triangles[0].swap(1, 2);
        assert!(b.check_watertight().is_err());
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let m = TriMesh::new(vec![Vec3::ZERO; 3], vec![[0, 1, 3]]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn normalize_fits_cube() {
        let mut s = uv_sphere(Vec3::new(3.0, -1.0, 2.0), 5.0, 8, 16);
        s.normalize(0.4).unwrap();
        assert!(s.is_normalized());
        let (lo, hi) = s.bounds().unwrap();
        assert!(((hi - lo) * 0.5).max_element() - 0.4 < 1e-12);
    }

    #[test]
    fn surface_samples_lie_on_triangles() {
        let b = box_mesh(Vec3::splat(-0.25), Vec3::splat(0.25));
        let mut rng = crate::rng::from_seed(3);
        for (p, _) in b.sample_surface(200, &mut rng).unwrap() {
            let on_face = [p.x, p.y, p.z].iter().any(|c| (c.abs() - 0.25).abs() < 1e-12);
            assert!(on_face, "{p:?}");
        }
    }
}
