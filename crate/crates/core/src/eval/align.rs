//! Similarity alignment of a predicted mesh to ground truth: a grid over yaw
//! and scale, each seed refined by point-to-point ICP with closed-form
//! similarity updates.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::{Mat3, Vec3};
use crate::spatial::KdTree;
use crate::volume::TriMesh;

/// `p -> scale * rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidSimilarity {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidSimilarity {
    fn default() -> Self {
        RigidSimilarity {
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            scale: 1.0,
        }
    }
}

impl RigidSimilarity {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) * self.scale + self.translation
    }

    pub fn inverse(&self) -> RigidSimilarity {
        let rt = self.rotation.transpose();
        RigidSimilarity {
            rotation: rt,
            translation: -(rt.mul_vec(self.translation) / self.scale),
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidSimilarity) -> RigidSimilarity {
        RigidSimilarity {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.apply(other.translation),
            scale: self.scale * other.scale,
        }
    }

    pub fn transform_mesh(&self, mesh: &TriMesh) -> TriMesh {
        let mut out = mesh.clone();
        for v in &mut out.vertices {
            *v = self.apply(*v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub yaw_steps_deg: Vec<f64>,
    pub scales: Vec<f64>,
    pub samples: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            yaw_steps_deg: (0..12).map(|k| 30.0 * k as f64).collect(),
            scales: vec![0.8, 0.9, 1.0, 1.1, 1.25],
            samples: 5000,
            max_iterations: 50,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub transform: RigidSimilarity,
    /// Mean nearest-neighbor distance from transformed `pred` samples to
    /// `gt` samples, before and after alignment.
    pub objective_before: f64,
    pub objective_after: f64,
}

const COARSE_SAMPLES: usize = 500;
const COARSE_ITERATIONS: usize = 20;
const REFINED_SEEDS: usize = 3;

fn mean_nn(tree: &KdTree, pts: &[Vec3], t: &RigidSimilarity) -> f64 {
    pts.iter()
        .map(|&p| tree.nearest(t.apply(p)).map_or(0.0, |(d, _)| d.sqrt()))
        .sum::<f64>()
        / pts.len() as f64
}

pub fn align(pred: &TriMesh, gt: &TriMesh, cfg: &AlignConfig) -> Result<Alignment> {
    ensure!(
        !pred.is_empty() && !gt.is_empty(),
        Error::InvalidArgument("alignment needs two non-empty meshes".into())
    );
    let mut rng = crate::rng::stream(cfg.seed, "align/pred");
    let src: Vec<Vec3> = pred.sample_surface(cfg.samples, &mut rng)?.into_iter().map(|s| s.0).collect();
    let mut rng = crate::rng::stream(cfg.seed, "align/gt");
    let dst: Vec<Vec3> = gt.sample_surface(cfg.samples, &mut rng)?.into_iter().map(|s| s.0).collect();
    let tree = KdTree::new(&dst);
    let identity = RigidSimilarity::default();
    let before = mean_nn(&tree, &src, &identity);
    let (cs, cd) = (centroid(&src), centroid(&dst));
    // Coarse pass: every seed on a strided subsample, then full-resolution
    // ICP from the best few.
    let stride = (src.len() / COARSE_SAMPLES).max(1);
    let coarse: Vec<Vec3> = src.iter().step_by(stride).copied().collect();
    let coarse_cfg = AlignConfig {
        max_iterations: cfg.max_iterations.min(COARSE_ITERATIONS),
        ..cfg.clone()
    };
    let mut seeds = Vec::new();
    for &yaw in &cfg.yaw_steps_deg {
        for &scale in &cfg.scales {
            let rotation = Mat3::yaw(yaw.to_radians());
            let seed = RigidSimilarity {
                rotation,
                scale,
                translation: cd - rotation.mul_vec(cs) * scale,
            };
            let refined = icp(&tree, &dst, &coarse, seed, &coarse_cfg);
            seeds.push((mean_nn(&tree, &coarse, &refined), refined));
        }
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = (before, identity);
    for (_, seed) in seeds.into_iter().take(REFINED_SEEDS) {
        let refined = icp(&tree, &dst, &src, seed, cfg);
        let obj = mean_nn(&tree, &src, &refined);
        if obj < best.0 {
            best = (obj, refined);
        }
    }
    Ok(Alignment {
        transform: best.1,
        objective_before: before,
        objective_after: best.0,
    })
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().fold(Vec3::ZERO, |a, &p| a + p) / pts.len() as f64
}

fn icp(tree: &KdTree, dst: &[Vec3], src: &[Vec3], init: RigidSimilarity, cfg: &AlignConfig) -> RigidSimilarity {
    let mut t = init;
    let mut last = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        let moved: Vec<Vec3> = src.iter().map(|&p| t.apply(p)).collect();
        let mut matched = Vec::with_capacity(src.len());
        let mut err = 0.0;
        for &m in &moved {
            let (d, j) = tree.nearest(m).expect("non-empty");
            matched.push(dst[j]);
            err += d.sqrt();
        }
        err /= src.len() as f64;
        let step = match umeyama(&moved, &matched) {
            Some(s) => s,
            None => break,
        };
        t = step.compose(&t);
        if (last - err).abs() < cfg.tolerance {
            break;
        }
        last = err;
    }
    t
}

/// Least-squares similarity mapping `src` onto `dst` (Horn's quaternion
/// method for the rotation, then the optimal scale).
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Option<RigidSimilarity> {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut m = [[0.0f64; 3]; 3];
    let mut var = 0.0;
    for (&a, &b) in src.iter().zip(dst) {
        let (a, b) = (a - cs, b - cd);
        var += a.norm_sq();
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += a[i] * b[j];
            }
        }
    }
    if var < 1e-18 {
        return None;
    }
    let (sxx, sxy, sxz) = (m[0][0], m[0][1], m[0][2]);
    let (syx, syy, syz) = (m[1][0], m[1][1], m[1][2]);
    let (szx, szy, szz) = (m[2][0], m[2][1], m[2][2]);
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let q = top_eigenvector4(n);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let rotation = Mat3::from_rows(
        Vec3::new(w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)),
        Vec3::new(2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)),
        Vec3::new(2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z),
    );
    let mut cov = 0.0;
    for (&a, &b) in src.iter().zip(dst) {
        cov += (b - cd).dot(rotation.mul_vec(a - cs));
    }
    let scale = cov / var;
    if scale <= 0.0 || !scale.is_finite() {
        return None;
    }
    Some(RigidSimilarity {
        rotation,
        scale,
        translation: cd - rotation.mul_vec(cs) * scale,
    })
}

/// Unit eigenvector of the largest eigenvalue of a symmetric 4x4 matrix
/// (cyclic Jacobi).
fn top_eigenvector4(mut a: [[f64; 4]; 4]) -> [f64; 4] {
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let best = (0..4).max_by(|&i, &j| a[i][i].total_cmp(&a[j][j])).unwrap();
    let mut q = [v[0][best], v[1][best], v[2][best], v[3][best]];
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut q {
        *x /= n;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mesh::box_mesh;

    /// Two boxes of different sizes: no rotational symmetry about z.
    pub(crate) fn asymmetric() -> TriMesh {
        let a = box_mesh(Vec3::new(-0.3, -0.2, -0.15), Vec3::new(0.1, 0.15, 0.1));
        let b = box_mesh(Vec3::new(0.1, -0.05, -0.15), Vec3::new(0.3, 0.05, 0.3));
        let mut m = a.clone();
        let off = m.vertices.len() as u32;
        m.vertices.extend(b.vertices);
        m.triangles.extend(b.triangles.iter().map(|t| t.map(|i| i + off)));
        m
    }

    #[test]
    fn umeyama_recovers_exact_similarity() {
        let t = RigidSimilarity {
            rotation: Mat3::rotation(Vec3::new(1.0, 2.0, 0.5), 0.8),
            translation: Vec3::new(0.1, -0.2, 0.05),
            scale: 1.3,
        };
        let src: Vec<Vec3> = asymmetric().vertices;
        let dst: Vec<Vec3> = src.iter().map(|&p| t.apply(p)).collect();
        let s = umeyama(&src, &dst).unwrap();
        assert!((s.scale - 1.3).abs() < 1e-9);
        assert!(s.rotation.mul_mat(&t.rotation.transpose()).rotation_angle() < 1e-9);
        assert!((s.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn recovers_synthetic_transform() {
        let gt = asymmetric();
        let truth = RigidSimilarity {
            rotation: Mat3::yaw(45f64.to_radians()),
            translation: Vec3::new(0.02, -0.01, 0.015),
            scale: 1.1,
        };
        let pred = truth.transform_mesh(&gt);
        let al = align(&pred, &gt, &AlignConfig::default()).unwrap();
        let want = truth.inverse();
        let got = al.transform;
        let angle = got.rotation.mul_mat(&want.rotation.transpose()).rotation_angle();
        assert!(angle.to_degrees() < 1.0, "{}", angle.to_degrees());
        assert!((got.scale / want.scale - 1.0).abs() < 0.01);
        assert!((got.translation - want.translation).norm() < 0.005);
        assert!(al.objective_after <= al.objective_before);
    }

    #[test]
    fn identical_meshes_align_to_identity() {
        let gt = asymmetric();
        let al = align(&gt, &gt, &AlignConfig::default()).unwrap();
        assert!(al.transform.rotation.rotation_angle().to_degrees() < 1.0);
        assert!((al.transform.scale - 1.0).abs() < 0.01);
        assert!(al.transform.translation.norm() < 0.005);
        assert!(al.objective_after <= al.objective_before);
    }

    #[test]
    fn empty_mesh_rejected() {
        assert!(align(&TriMesh::default(), &asymmetric(), &AlignConfig::default()).is_err());
    }
}
