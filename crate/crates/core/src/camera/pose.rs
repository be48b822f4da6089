use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::{Mat3, Vec3};

/// Near plane distance in world units.
pub const NEAR: f64 = 1e-3;

/// Rigid offset applied on top of the look-at camera: the camera frame is
/// rotated by `rotation` and its center moved by `translation`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseOffset {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Pinhole camera looking at the origin from spherical coordinates, with
/// world +z as up. Angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
    #[serde(default)]
    pub offset: PoseOffset,
}

/// A projected point: continuous pixel coordinates (pixel centers at
/// half-integers) and depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Camera frame: `right`, `up` and `forward` are orthonormal.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub center: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraPose {
    pub fn new(elevation: f64, azimuth: f64, radius: f64, fov_y: f64, resolution: usize) -> Result<Self> {
        let pose = CameraPose {
            elevation,
            azimuth: azimuth.rem_euclid(360.0),
            radius,
            fov_y,
            resolution,
            offset: PoseOffset::default(),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.elevation > -90.0 && self.elevation < 90.0,
            Error::InvalidArgument(format!("elevation {} outside (-90, 90)", self.elevation))
        );
        ensure!(
            self.radius > 0.0,
            Error::InvalidArgument(format!("radius {} must be > 0", self.radius))
        );
        ensure!(
            self.fov_y > 0.0 && self.fov_y < 180.0,
            Error::InvalidArgument(format!("fov {} outside (0, 180)", self.fov_y))
        );
        ensure!(
            self.resolution > 0,
            Error::InvalidArgument("resolution must be > 0".into())
        );
        Ok(())
    }

    /// Camera center before the offset.
    pub fn look_at_center(&self) -> Vec3 {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * self.radius
    }

    pub fn frame(&self) -> Frame {
        let c = self.look_at_center();
        let forward = (-c).normalized();
        let right = forward.cross(Vec3::new(0.0, 0.0, 1.0)).normalized();
        let up = right.cross(forward);
        let r = &self.offset.rotation;
        Frame {
            center: c + self.offset.translation,
            right: r.mul_vec(right),
            up: r.mul_vec(up),
            forward: r.mul_vec(forward),
        }
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.resolution as f64 / (0.5 * self.fov_y.to_radians()).tan()
    }

    /// Perspective projection without the image-bounds test; `None` only
    /// behind the near plane.
    pub fn project_unbounded(&self, p: Vec3) -> Option<Projection> {
        self.project_in(&self.frame(), p)
    }

    pub(crate) fn project_in(&self, fr: &Frame, p: Vec3) -> Option<Projection> {
        let d = p - fr.center;
        let depth = d.dot(fr.forward);
        if depth <= NEAR {
            return None;
        }
        let f = self.focal();
        let half = 0.5 * self.resolution as f64;
        Some(Projection {
            u: half + f * d.dot(fr.right) / depth,
            v: half - f * d.dot(fr.up) / depth,
            depth,
        })
    }

    /// Projection of `p`, or `None` when it falls behind the camera or
    /// outside the image.
    pub fn project(&self, p: Vec3) -> Option<Projection> {
        let pr = self.project_unbounded(p)?;
        let n = self.resolution as f64;
        if pr.u >= 0.0 && pr.u < n && pr.v >= 0.0 && pr.v < n {
            Some(pr)
        } else {
            None
        }
    }

    /// Inverse of [`project`](Self::project) given the depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.unproject_in(&self.frame(), u, v, depth)
    }

    pub(crate) fn unproject_in(&self, fr: &Frame, u: f64, v: f64, depth: f64) -> Vec3 {
        let f = self.focal();
        let half = 0.5 * self.resolution as f64;
        let x = (u - half) / f * depth;
        let y = (half - v) / f * depth;
        fr.center + fr.right * x + fr.up * y + fr.forward * depth
    }
}

/// Camera intrinsics and distance shared by every pose of a rig.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigParams {
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
}

impl Default for RigParams {
    fn default() -> Self {
        RigParams {
            radius: 1.5,
            fov_y: 45.0,
            resolution: 128,
        }
    }
}

/// Number of generated target views.
pub const TARGET_VIEWS: usize = 6;

/// Fixed elevations of the six target views.
pub const TARGET_ELEVATIONS: [f64; 2] = [30.0, -20.0];
/// Azimuth of target 0 relative to the input view, and the step between
/// consecutive targets.
pub const TARGET_AZIMUTH_START: f64 = 30.0;
pub const TARGET_AZIMUTH_STEP: f64 = 60.0;

/// The input view plus six target views at alternating absolute elevations
/// and azimuths relative to the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRig {
    pub input: CameraPose,
    pub targets: Vec<CameraPose>,
}

pub fn make_pose_rig(input_elevation: f64, input_azimuth: f64, params: RigParams) -> Result<PoseRig> {
    let input = CameraPose::new(
        input_elevation,
        input_azimuth,
        params.radius,
        params.fov_y,
        params.resolution,
    )?;
    let targets = (0..TARGET_VIEWS)
        .map(|k| {
            CameraPose::new(
                TARGET_ELEVATIONS[k % 2],
                input.azimuth + TARGET_AZIMUTH_START + TARGET_AZIMUTH_STEP * k as f64,
                params.radius,
                params.fov_y,
                params.resolution,
            )
        })
        .collect::<Result<_>>()?;
    Ok(PoseRig { input, targets })
}

/// Independent random rotation (up to `rot_deg_max` about a uniformly random
/// axis) and translation (up to `trans_frac_max * radius`, uniform in the
/// ball) for each target pose. The input pose is left untouched.
pub fn perturb_poses(rig: &PoseRig, rot_deg_max: f64, trans_frac_max: f64, seed: u64) -> Result<PoseRig> {
    ensure!(
        rot_deg_max >= 0.0 && trans_frac_max >= 0.0,
        Error::InvalidArgument("perturbation magnitudes must be >= 0".into())
    );
    let mut rng = crate::rng::stream(seed, "perturb_poses");
    let mut out = rig.clone();
    if rot_deg_max == 0.0 && trans_frac_max == 0.0 {
        return Ok(out);
    }
    for pose in &mut out.targets {
        let axis = random_unit(&mut rng);
        let angle = rng.random::<f64>() * rot_deg_max.to_radians();
        let dir = random_unit(&mut rng);
        let r = rng.random::<f64>().cbrt() * trans_frac_max * pose.radius;
        let rotation = Mat3::rotation(axis, angle).mul_mat(&pose.offset.rotation);
        pose.offset = PoseOffset {
            rotation,
            translation: pose.offset.translation + dir * r,
        };
    }
    Ok(out)
}

fn random_unit(rng: &mut crate::rng::Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-9 {
            return v.normalized();
        }
    }
}
