//! One training datum and its on-disk layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::camera::io::{read_depth, read_png, write_depth, write_png};
use crate::camera::{make_pose_rig, rasterize, unproject_views, CameraPose, PoseRig, RenderedView, RigParams, Shading};
use crate::error::{ensure, Error, Result};
use crate::volume::io::{read_ply, read_volume, write_ply, write_volume, Volume};
use crate::volume::{
    build_color_volume, compute_sdf_at, compute_sdf_volume, sdf_to_occupancy, subdivide_occupancy, DenseVolume,
    SparseVolume, TriMesh, VolumeSpec,
};

/// Range of the randomly drawn input-view elevation, degrees.
pub const INPUT_ELEVATION_RANGE: (f64, f64) = (-10.0, 40.0);

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub shape_id: String,
    pub mesh: TriMesh,
    /// Normalized SDF at the coarse resolution.
    pub sdf_vol: DenseVolume,
    /// Binary shell, `|sdf| < tau`.
    pub occ_vol: DenseVolume,
    /// `[sdf, r, g, b]` on the subdivided shell, all in `[-1, 1]`.
    pub fine_sparse: SparseVolume,
    pub views: Vec<RenderedView>,
    pub poses: PoseRig,
    pub input_view: RenderedView,
}

pub const FINE_CHANNELS: usize = 4;

/// Renders a view with colors snapped to 8-bit levels, so that PNG storage
/// is lossless.
pub fn render_view(mesh: &TriMesh, pose: &CameraPose) -> Result<RenderedView> {
    let mut v = rasterize(mesh, pose, Shading::Unlit)?;
    v.rgb.quantize();
    Ok(v)
}

/// Draws the input-view angles for a sample.
pub fn draw_input_view(seed: u64) -> (f64, f64) {
    let mut rng = crate::rng::stream(seed, "input_view");
    let (lo, hi) = INPUT_ELEVATION_RANGE;
    (rng.random_range(lo..hi), rng.random_range(0.0..360.0))
}

pub fn build_sample(
    shape_id: &str,
    mesh: &TriMesh,
    coarse: &VolumeSpec,
    fine: &VolumeSpec,
    rig_params: RigParams,
    seed: u64,
) -> Result<ShapeSample> {
    ensure!(
        fine.resolution == 2 * coarse.resolution,
        Error::InvalidArgument(format!(
            "fine resolution {} must be twice the coarse resolution {}",
            fine.resolution, coarse.resolution
        ))
    );
    ensure!(
        mesh.colors.is_some(),
        Error::InvalidArgument("sample meshes need vertex colors".into())
    );
    let sdf_vol = compute_sdf_volume(mesh, coarse)?;
    let occ_vol = sdf_to_occupancy(&sdf_vol, coarse.tau)?;
    ensure!(
        occ_vol.count_nonzero() > 0,
        Error::EmptyOccupancy
    );
    let (el, az) = draw_input_view(seed);
    let poses = make_pose_rig(el, az, rig_params)?;
    let views = poses
        .targets
        .iter()
        .map(|p| render_view(mesh, p))
        .collect::<Result<Vec<_>>>()?;
    let input_view = render_view(mesh, &poses.input)?;

    let mut all_views = views.clone();
    all_views.push(input_view.clone());
    let mut all_poses = poses.targets.clone();
    all_poses.push(poses.input);
    let cloud = unproject_views(&all_views, &all_poses)?;

    let indices = subdivide_occupancy(&occ_vol);
    let sdf = compute_sdf_at(mesh, fine, &indices)?;
    let colors = build_color_volume(&cloud, &indices, fine)?;
    let mut values = Vec::with_capacity(indices.len() * FINE_CHANNELS);
    for (n, s) in sdf.iter().enumerate() {
        values.push(*s);
        values.extend_from_slice(colors.value(n));
    }
    let fine_sparse = SparseVolume::new(*fine, indices, FINE_CHANNELS, values)?;
    let sample = ShapeSample {
        shape_id: shape_id.to_string(),
        mesh: mesh.clone(),
        sdf_vol,
        occ_vol,
        fine_sparse,
        views,
        poses,
        input_view,
    };
    sample.validate()?;
    Ok(sample)
}

impl ShapeSample {
    pub fn coarse_spec(&self) -> VolumeSpec {
        self.sdf_vol.spec
    }

    pub fn fine_spec(&self) -> VolumeSpec {
        self.fine_sparse.spec
    }

    /// Checks the structural invariants: fine indices are exactly the
    /// subdivided shell, and fine SDF signs agree with the coarse SDF
    /// wherever the coarse value is far enough from zero to decide them.
    pub fn validate(&self) -> Result<()> {
        let coarse = self.coarse_spec();
        let fine = self.fine_spec();
        ensure!(
            fine.resolution == 2 * coarse.resolution && self.occ_vol.spec == coarse,
            Error::ShapeMismatch(format!("sample {}: inconsistent volume specs", self.shape_id))
        );
        ensure!(
            self.sdf_vol.channels == 1 && self.occ_vol.channels == 1 && self.fine_sparse.width == FINE_CHANNELS,
            Error::ShapeMismatch(format!("sample {}: unexpected channel counts", self.shape_id))
        );
        self.fine_sparse.validate()?;
        ensure!(
            self.fine_sparse.indices == subdivide_occupancy(&self.occ_vol),
            Error::InvalidArgument(format!(
                "sample {}: fine indices differ from the subdivided occupancy",
                self.shape_id
            ))
        );
        // Child centers sit sqrt(3)/4 coarse voxels from the parent center;
        // a 1-Lipschitz SDF cannot change sign over that distance when the
        // parent value exceeds it.
        let margin = 3f64.sqrt() / 4.0 * coarse.voxel_size();
        for (n, v) in self.fine_sparse.indices.iter().enumerate() {
            let parent = [v[0] / 2, v[1] / 2, v[2] / 2];
            let pc = self.sdf_vol.get(0, parent) as f64 * coarse.truncation as f64;
            let fc = self.fine_sparse.value(n)[0];
            if pc.abs() > margin + 1e-9 {
                ensure!(
                    fc != 0.0 && (fc > 0.0) == (pc > 0.0),
                    Error::InvalidArgument(format!(
                        "sample {}: fine SDF sign disagrees with coarse at {v:?}",
                        self.shape_id
                    ))
                );
            }
        }
        ensure!(
            self.views.len() == 6 && self.poses.targets.len() == 6,
            Error::ShapeMismatch(format!("sample {}: expected 6 target views", self.shape_id))
        );
        for (v, p) in self.views.iter().zip(&self.poses.targets).chain([(&self.input_view, &self.poses.input)]) {
            ensure!(
                v.resolution() == p.resolution && v.depth.len() == p.resolution * p.resolution,
                Error::ShapeMismatch(format!("sample {}: view resolution mismatch", self.shape_id))
            );
        }
        Ok(())
    }

    /// File names written by [`ShapeSample::save`].
    pub fn file_names() -> Vec<String> {
        let mut names = vec!["mesh.ply".to_string(), "coarse.vxl".into(), "fine.vxl".into()];
        for k in 0..6 {
            names.push(format!("view_{k}.png"));
            names.push(format!("depth_{k}.dpt"));
        }
        names.extend(["input.png".into(), "depth_input.dpt".into(), "poses.txt".into()]);
        names
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ply(&dir.join("mesh.ply"), &self.mesh)?;
        write_volume(&dir.join("coarse.vxl"), &Volume::Dense(self.sdf_vol.clone()))?;
        write_volume(&dir.join("fine.vxl"), &Volume::Sparse(self.fine_sparse.clone()))?;
        for (k, v) in self.views.iter().enumerate() {
            save_view(dir, &format!("view_{k}.png"), &format!("depth_{k}.dpt"), v)?;
        }
        save_view(dir, "input.png", "depth_input.dpt", &self.input_view)?;
        let path = dir.join("poses.txt");
        fs::write(&path, format_poses(&self.poses)).map_err(|e| Error::io(&path, e))
    }

    /// Reads and validates a sample directory. The shape id is the
    /// directory name.
    pub fn load(dir: &Path) -> Result<ShapeSample> {
        let shape_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(dir, "sample directory has no name"))?
            .to_string();
        let mesh = read_ply(&dir.join("mesh.ply"))?;
        let sdf_vol = match read_volume(&dir.join("coarse.vxl"))? {
            Volume::Dense(d) => d,
            Volume::Sparse(_) => return Err(Error::format(&dir.join("coarse.vxl"), "expected a dense volume")),
        };
        let fine_sparse = match read_volume(&dir.join("fine.vxl"))? {
            Volume::Sparse(s) => s,
            Volume::Dense(_) => return Err(Error::format(&dir.join("fine.vxl"), "expected a sparse volume")),
        };
        let occ_vol = sdf_to_occupancy(&sdf_vol, sdf_vol.spec.tau)?;
        let path = dir.join("poses.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let poses = parse_poses(&text).map_err(|m| Error::format(&path, m))?;
        let views = (0..6)
            .map(|k| load_view(dir, &format!("view_{k}.png"), &format!("depth_{k}.dpt")))
            .collect::<Result<Vec<_>>>()?;
        let input_view = load_view(dir, "input.png", "depth_input.dpt")?;
        let sample = ShapeSample {
            shape_id,
            mesh,
            sdf_vol,
            occ_vol,
            fine_sparse,
            views,
            poses,
            input_view,
        };
        sample.validate()?;
        Ok(sample)
    }
}

fn save_view(dir: &Path, png: &str, dpt: &str, v: &RenderedView) -> Result<()> {
    write_png(&dir.join(png), &v.rgb)?;
    let n = v.resolution();
    write_depth(&dir.join(dpt), n, n, &v.depth)
}

fn load_view(dir: &Path, png: &str, dpt: &str) -> Result<RenderedView> {
    let rgb = read_png(&dir.join(png))?;
    let (w, h, depth) = read_depth(&dir.join(dpt))?;
    ensure!(
        w == rgb.width && h == rgb.height && w == h,
        Error::format(&dir.join(dpt), "depth and color sizes differ")
    );
    let mask = depth.iter().map(|d| d.is_finite()).collect();
    Ok(RenderedView { rgb, depth, mask })
}

/// One pose per line: `name elevation azimuth radius fov_y resolution`.
/// Offsets are not stored; sample poses are never perturbed.
pub fn format_poses(rig: &PoseRig) -> String {
    let mut s = String::from("# name elevation azimuth radius fov_y resolution\n");
    let line = |s: &mut String, name: &str, p: &CameraPose| {
        let _ = writeln!(s, "{name} {} {} {} {} {}", p.elevation, p.azimuth, p.radius, p.fov_y, p.resolution);
    };
    line(&mut s, "input", &rig.input);
    for (k, p) in rig.targets.iter().enumerate() {
        line(&mut s, &format!("target{k}"), p);
    }
    s
}

pub fn parse_poses(text: &str) -> std::result::Result<PoseRig, String> {
    let mut input = None;
    let mut targets = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("malformed pose line {line:?}"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line:?}: {e}"));
        let res = f[5].parse::<usize>().map_err(|e| format!("{line:?}: {e}"))?;
        let pose = CameraPose::new(num(1)?, num(2)?, num(3)?, num(4)?, res).map_err(|e| e.to_string())?;
        if f[0] == "input" {
            input = Some(pose);
        } else if f[0] == format!("target{}", targets.len()) {
            targets.push(pose);
        } else {
            return Err(format!("unexpected pose name {:?}", f[0]));
        }
    }
    let input = input.ok_or("missing input pose")?;
    if targets.len() != 6 {
        return Err(format!("expected 6 target poses, found {}", targets.len()));
    }
    Ok(PoseRig { input, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;
    use crate::volume::mesh::uv_sphere;

    fn sphere(color: [f32; 3]) -> TriMesh {
        let m = uv_sphere(Vec3::ZERO, 0.3, 48, 96);
        let n = m.vertices.len();
        m.with_colors(vec![color; n])
    }

    fn small_rig() -> RigParams {
        RigParams {
            resolution: 64,
            ..RigParams::default()
        }
    }

    #[test]
    fn sphere_sample_invariants() {
        let coarse = VolumeSpec::new(32).unwrap();
        let fine = coarse.refined(1.0, 3.0).unwrap();
        let s = build_sample("ball", &sphere([1.0, 0.0, 0.0]), &coarse, &fine, small_rig(), 3).unwrap();
        let occ = s.occ_vol.count_nonzero();
        assert_eq!(s.fine_sparse.len(), 8 * occ);
        // Shell of half-width tau around the sphere.
        let r = 0.3f64;
        let tau = coarse.tau as f64;
        let vs = coarse.voxel_size();
        let expect = 4.0 * std::f64::consts::PI * r * r * (2.0 * tau) / vs.powi(3);
        assert!((occ as f64 - expect).abs() / expect < 0.1, "{occ} vs {expect}");
        for n in 0..s.fine_sparse.len() {
            assert_eq!(&s.fine_sparse.value(n)[1..], &[1.0, -1.0, -1.0]);
        }
    }

    #[test]
    fn pose_text_round_trip() {
        let rig = make_pose_rig(12.345678901, 271.000001, RigParams::default()).unwrap();
        assert_eq!(parse_poses(&format_poses(&rig)).unwrap(), rig);
        assert!(parse_poses("input 1 2 3").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let coarse = VolumeSpec::new(16).unwrap();
        let fine = coarse.refined(1.0, 3.0).unwrap();
        let mesh = crate::corpus::generate_shape(4, 2).unwrap();
        let s = build_sample("s0", &mesh, &coarse, &fine, small_rig(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s0");
        s.save(&path).unwrap();
        assert_eq!(ShapeSample::load(&path).unwrap(), s);
        for f in ShapeSample::file_names() {
            assert!(path.join(&f).exists(), "{f}");
        }
    }

    #[test]
    fn resolution_pair_enforced() {
        let coarse = VolumeSpec::new(16).unwrap();
        let bad = VolumeSpec::new(64).unwrap();
        assert!(build_sample("x", &sphere([0.5; 3]), &coarse, &bad, small_rig(), 0).is_err());
    }
}
