//! Procedural CSG shapes: unions of posed primitives, triangulated by
//! marching cubes over their combined signed distance.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::{Mat3, Vec3};
use crate::volume::{marching_cubes_fn, TriMesh};

/// Marching-cubes resolution for shape triangulation.
pub const SHAPE_RESOLUTION: usize = 128;
/// Largest half-extent of a generated shape. Leaves room for the SDF
/// truncation band inside the unit cube.
pub const SHAPE_HALF_EXTENT: f64 = 0.4;
const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
    /// Ring in the local xy plane.
    Torus { major: f64, minor: f64 },
    /// `(|x/a|^n + |y/b|^n + |z/c|^n)^(1/n) = 1`.
    Superellipsoid { radii: Vec3, exponent: f64 },
}

impl Primitive {
    /// Signed distance in the local frame. Exact except for the
    /// superellipsoid, whose value is a scaled implicit function with the
    /// correct sign.
    pub fn distance(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Sphere { radius } => p.norm() - radius,
            Primitive::Box { half } => {
                let q = p.abs() - half;
                q.max(Vec3::ZERO).norm() + q.max_element().min(0.0)
            }
            Primitive::Cylinder { radius, half_height } => {
                let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dx.max(dz).min(0.0)
            }
            Primitive::Torus { major, minor } => {
                let qx = (p.x * p.x + p.y * p.y).sqrt() - major;
                (qx * qx + p.z * p.z).sqrt() - minor
            }
            Primitive::Superellipsoid { radii, exponent } => {
                let n = exponent;
                let s = (p.x / radii.x).abs().powf(n) + (p.y / radii.y).abs().powf(n) + (p.z / radii.z).abs().powf(n);
                (s.powf(1.0 / n) - 1.0) * radii.x.min(radii.y).min(radii.z)
            }
        }
    }
}

/// A primitive placed in the world: `p_local = rotation^T (p - center)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedPrimitive {
    pub primitive: Primitive,
    pub rotation: Mat3,
    pub center: Vec3,
    /// Albedo, already snapped to 8-bit levels.
    pub color: [f32; 3],
}

impl PlacedPrimitive {
    pub fn distance(&self, p: Vec3) -> f64 {
        self.primitive
            .distance(self.rotation.transpose().mul_vec(p - self.center))
    }
}

/// A union of primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsgShape {
    pub parts: Vec<PlacedPrimitive>,
}

impl CsgShape {
    /// Distance to the union and the index of the closest part (lowest index
    /// on ties).
    pub fn eval(&self, p: Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, part) in self.parts.iter().enumerate() {
            let d = part.distance(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Triangulates the union at `res^3`, colors vertices by their closest
    /// part and normalizes to [`SHAPE_HALF_EXTENT`].
    pub fn triangulate(&self, res: usize) -> Result<TriMesh> {
        let mut mesh = marching_cubes_fn(
            res,
            |p| self.eval(p).0 as f32,
            |p| self.parts[self.eval(p).1].color,
            1.0,
        );
        ensure!(!mesh.is_empty(), Error::Degenerate("shape produced no surface".into()));
        mesh.normalize(SHAPE_HALF_EXTENT)?;
        Ok(mesh)
    }
}

fn snap8(c: f32) -> f32 {
    (c * 255.0).round() / 255.0
}

fn random_rotation(rng: &mut crate::rng::Rng) -> Mat3 {
    let axis = loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    Mat3::rotation(axis, rng.random_range(0.0..std::f64::consts::TAU))
}

fn random_primitive(rng: &mut crate::rng::Rng) -> Primitive {
    match rng.random_range(0..5) {
        0 => Primitive::Sphere {
            radius: rng.random_range(0.12..0.25),
        },
        1 => Primitive::Box {
            half: Vec3::new(
                rng.random_range(0.06..0.22),
                rng.random_range(0.06..0.22),
                rng.random_range(0.06..0.22),
            ),
        },
        2 => Primitive::Cylinder {
            radius: rng.random_range(0.06..0.18),
            half_height: rng.random_range(0.08..0.25),
        },
        3 => {
            let major = rng.random_range(0.12..0.22);
            Primitive::Torus {
                major,
                minor: rng.random_range(0.04..0.4 * major + 0.02),
            }
        }
        _ => Primitive::Superellipsoid {
            radii: Vec3::new(
                rng.random_range(0.08..0.22),
                rng.random_range(0.08..0.22),
                rng.random_range(0.08..0.22),
            ),
            exponent: rng.random_range(1.5..5.0),
        },
    }
}

/// Number of parts for a complexity level: exactly one at level 1,
/// otherwise uniform in `1..=complexity + 1`.
fn part_count(complexity: u32, rng: &mut crate::rng::Rng) -> usize {
    if complexity == 1 {
        1
    } else {
        rng.random_range(1..=complexity as usize + 1)
    }
}

/// Draws a random union of primitives. Parts are placed so that each one
/// overlaps the union of the previous parts.
pub fn random_csg(complexity: u32, rng: &mut crate::rng::Rng) -> CsgShape {
    let count = part_count(complexity, rng);
    let mut parts: Vec<PlacedPrimitive> = Vec::with_capacity(count);
    for k in 0..count {
        let primitive = random_primitive(rng);
        let rotation = random_rotation(rng);
        let color = [0; 3].map(|_| snap8(rng.random_range(0.1f32..0.9)));
        let center = if k == 0 {
            Vec3::ZERO
        } else {
            // Anchor on a previous part's center, offset by a modest step.
            let anchor = parts[rng.random_range(0..k)].center;
            let step = Vec3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            );
            (anchor + step).max(Vec3::splat(-0.12)).min(Vec3::splat(0.12))
        };
        parts.push(PlacedPrimitive {
            primitive,
            rotation,
            center,
            color,
        });
    }
    CsgShape { parts }
}

/// Watertight, normalized, colored shape; deterministic per `(seed,
/// complexity)`.
pub fn generate_shape(seed: u64, complexity: u32) -> Result<TriMesh> {
    Ok(generate_shape_with_csg(seed, complexity)?.1)
}

pub fn generate_shape_with_csg(seed: u64, complexity: u32) -> Result<(CsgShape, TriMesh)> {
    ensure!(
        (1..=5).contains(&complexity),
        Error::InvalidArgument(format!("complexity {complexity} outside 1..=5"))
    );
    let mut rng = crate::rng::stream(seed, "generate_shape");
    for _ in 0..MAX_ATTEMPTS {
        let csg = random_csg(complexity, &mut rng);
        let mesh = match csg.triangulate(SHAPE_RESOLUTION) {
            Ok(m) => m,
            Err(_) => continue,
        };
        if mesh.check_watertight().is_ok() && mesh.is_normalized() && mesh.signed_volume() > 1e-4 {
            return Ok((csg, mesh));
        }
    }
    Err(Error::Degenerate(format!(
        "no valid shape for seed {seed} after {MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(p: &Primitive, x: Vec3) -> Vec3 {
        let h = 1e-6;
        Vec3::new(
            p.distance(x + Vec3::new(h, 0.0, 0.0)) - p.distance(x - Vec3::new(h, 0.0, 0.0)),
            p.distance(x + Vec3::new(0.0, h, 0.0)) - p.distance(x - Vec3::new(0.0, h, 0.0)),
            p.distance(x + Vec3::new(0.0, 0.0, h)) - p.distance(x - Vec3::new(0.0, 0.0, h)),
        ) / (2.0 * h)
    }

    #[test]
    fn exact_primitives_have_unit_gradient() {
        let prims = [
            Primitive::Sphere { radius: 0.2 },
            Primitive::Box { half: Vec3::new(0.1, 0.2, 0.15) },
            Primitive::Cylinder { radius: 0.1, half_height: 0.2 },
            Primitive::Torus { major: 0.2, minor: 0.05 },
        ];
        let mut rng = crate::rng::from_seed(3);
        for p in &prims {
            for _ in 0..200 {
                let x = Vec3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                );
                let g = grad(p, x).norm();
                // Distance fields are 1-Lipschitz, and have unit gradient
                // away from the medial axis.
                assert!(g <= 1.0 + 1e-4, "{p:?} {g}");
            }
        }
    }

    #[test]
    fn primitive_signs() {
        let b = Primitive::Box { half: Vec3::splat(0.1) };
        assert_eq!(b.distance(Vec3::ZERO), -0.1);
        assert!((b.distance(Vec3::new(0.2, 0.0, 0.0)) - 0.1).abs() < 1e-12);
        let t = Primitive::Torus { major: 0.2, minor: 0.05 };
        assert!(t.distance(Vec3::ZERO) > 0.0);
        assert!(t.distance(Vec3::new(0.2, 0.0, 0.0)) < 0.0);
        let s = Primitive::Superellipsoid { radii: Vec3::new(0.1, 0.2, 0.3), exponent: 2.0 };
        assert!(s.distance(Vec3::new(0.0, 0.0, 0.29)) < 0.0);
        assert!(s.distance(Vec3::new(0.0, 0.0, 0.31)) > 0.0);
    }

    #[test]
    fn complexity_one_is_single_primitive() {
        for seed in 0..5 {
            let mut rng = crate::rng::stream(seed, "generate_shape");
            assert_eq!(random_csg(1, &mut rng).parts.len(), 1);
            let (csg, mesh) = generate_shape_with_csg(seed, 1).unwrap();
            assert_eq!(csg.parts.len(), 1);
            mesh.check_watertight().unwrap();
            assert!(mesh.is_normalized());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_shape(11, 3).unwrap();
        let b = generate_shape(11, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_shape(12, 3).unwrap());
    }

    #[test]
    fn colors_come_from_parts() {
        let (csg, mesh) = generate_shape_with_csg(5, 4).unwrap();
        let palette: Vec<[f32; 3]> = csg.parts.iter().map(|p| p.color).collect();
        for c in mesh.colors.as_ref().unwrap() {
            assert!(palette.contains(c));
        }
    }

    #[test]
    fn bad_complexity_rejected() {
        assert!(generate_shape(0, 0).is_err());
        assert!(generate_shape(0, 6).is_err());
    }
}
