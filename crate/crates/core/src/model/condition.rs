//! Multi-view condition: per-view patch features, the projected feature
//! volume, its multi-resolution pyramid, projected colors for the last
//! stage-2 layer and the global vector added to the time embedding.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Layout, ParameterStore, Stencils, Tape, Tensor, Var};
use crate::camera::{CameraPose, RenderedView};
use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::rng::Rng;
use crate::volume::grid::Voxel;
use crate::volume::VolumeSpec;

use super::nn::{Conv, GroupNorm, Init, Linear, SparseConv};
use super::sparse::SparseHierarchy;

/// Depth offsets are divided by this, the half-diagonal of the unit cube.
const DEPTH_SCALE: f64 = 0.866_025_403_784_438_6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConfig {
    /// Pixels per patch side; a power of two.
    pub patch_size: usize,
    /// Patch feature channels `D`.
    pub feature_dim: usize,
    pub mlp_hidden: usize,
    /// Channels of the feature volume and of every pyramid level.
    pub channels: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        ConditionConfig {
            patch_size: 16,
            feature_dim: 32,
            mlp_hidden: 32,
            channels: 16,
        }
    }
}

impl ConditionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: key.into(),
            message: message.into(),
        };
        ensure!(
            self.patch_size >= 2 && self.patch_size.is_power_of_two(),
            bad("condition.patch_size", "must be a power of two >= 2")
        );
        ensure!(self.feature_dim > 0, bad("condition.feature_dim", "must be positive"));
        ensure!(self.mlp_hidden > 0, bad("condition.mlp_hidden", "must be positive"));
        ensure!(self.channels > 0, bad("condition.channels", "must be positive"));
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let blocks = self.patch_size.trailing_zeros() as usize;
        (0..blocks)
            .map(|i| (self.feature_dim >> (blocks - 1 - i)).max(8).min(self.feature_dim))
            .collect()
    }
}

/// How the generated views enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiView {
    /// Views are ignored; the condition volume is zero.
    Off,
    /// Mean-pooled view features are concatenated and added to the time
    /// embedding; the condition volume is zero.
    Pooled,
    /// Projected local feature volume.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionMode {
    pub multiview: MultiView,
    /// Input-view vector added to the time embedding.
    pub global: bool,
}

impl Default for ConditionMode {
    fn default() -> Self {
        ConditionMode {
            multiview: MultiView::Local,
            global: true,
        }
    }
}

/// The images and cameras a condition is built from.
#[derive(Clone, Debug)]
pub struct ConditionInputs<'a> {
    pub views: &'a [RenderedView],
    pub poses: &'a [CameraPose],
    pub input_view: &'a RenderedView,
}

/// Condition pieces on the tape.
pub struct Conditioning {
    /// One volume per UNet level, finest first.
    pub pyramid: Vec<Var>,
    /// `[E]` vector for the time embedding, if any conditioning is global.
    pub global: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ConditionNet {
    pub cfg: ConditionConfig,
    pub mode: ConditionMode,
    prefix: String,
    encoder: Vec<(Conv, GroupNorm)>,
    mlp: (Linear, Linear),
    dense_pyramid: Vec<Conv>,
    sparse_pyramid: Vec<SparseConv>,
    global_proj: Linear,
    pooled_proj: Linear,
}

impl ConditionNet {
    /// `levels` is the UNet level count, `time_dim` its embedding width,
    /// `views` the number of generated views.
    pub fn new(prefix: &str, cfg: ConditionConfig, mode: ConditionMode, levels: usize, time_dim: usize, views: usize) -> Result<Self> {
        cfg.validate()?;
        ensure!(levels >= 1, Error::InvalidArgument("condition pyramid needs a level".into()));
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.encoder_widths().iter().enumerate() {
            encoder.push((
                Conv::planar(&format!("{prefix}.enc{i}"), cin, w, 3, 2),
                GroupNorm::new(&format!("{prefix}.enc{i}.gn"), w),
            ));
            cin = w;
        }
        let c = cfg.channels;
        Ok(ConditionNet {
            mlp: (
                Linear::new(&format!("{prefix}.mlp0"), cfg.feature_dim + 2, cfg.mlp_hidden),
                Linear::new(&format!("{prefix}.mlp1"), cfg.mlp_hidden, c),
            ),
            dense_pyramid: (1..levels)
                .map(|l| Conv::cube(&format!("{prefix}.pyr{l}"), c, c, 3, 2))
                .collect(),
            sparse_pyramid: (1..levels)
                .map(|l| SparseConv {
                    name: format!("{prefix}.pyr{l}"),
                    cin: c,
                    cout: c,
                    taps: 8,
                })
                .collect(),
            global_proj: Linear::new(&format!("{prefix}.global"), cfg.feature_dim, time_dim),
            pooled_proj: Linear::new(&format!("{prefix}.pooled"), cfg.feature_dim * views, time_dim),
            encoder,
            prefix: prefix.into(),
            cfg,
            mode,
        })
    }

    pub fn levels(&self) -> usize {
        self.dense_pyramid.len() + 1
    }

    fn uses_encoder(&self) -> bool {
        self.mode.global || self.mode.multiview != MultiView::Off
    }

    /// Registers the parameters the mode needs. `sparse` selects the
    /// pyramid flavor.
    pub fn init(&self, store: &mut ParameterStore, sparse: bool, rng: &mut Rng) -> Result<()> {
        if self.uses_encoder() {
            for (conv, gn) in &self.encoder {
                conv.init(store, Init::Normal, rng)?;
                gn.init(store)?;
            }
        }
        if self.mode.multiview == MultiView::Local {
            self.mlp.0.init(store, Init::Normal, rng)?;
            self.mlp.1.init(store, Init::Normal, rng)?;
            if sparse {
                for conv in &self.sparse_pyramid {
                    conv.init(store, Init::Normal, rng)?;
                }
            } else {
                for conv in &self.dense_pyramid {
                    conv.init(store, Init::Normal, rng)?;
                }
            }
        }
        if self.mode.global {
            self.global_proj.init(store, Init::Normal, rng)?;
        }
        if self.mode.multiview == MultiView::Pooled {
            self.pooled_proj.init(store, Init::Normal, rng)?;
        }
        Ok(())
    }

    /// Patch features `[D, 1, P, P]` of one view.
    pub fn encode(&self, tape: &mut Tape<f32>, p: &Bound, view: &RenderedView) -> Result<Var> {
        let n = view.resolution();
        ensure!(
            n > 0 && n % self.cfg.patch_size == 0,
            Error::InvalidArgument(format!(
                "view resolution {n} is not divisible by patch size {}",
                self.cfg.patch_size
            ))
        );
        let mut data = vec![0.0f32; 3 * n * n];
        for (i, px) in view.rgb.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n * n + i] = 2.0 * px[c] - 1.0;
            }
        }
        let mut h = tape.constant(Tensor::new(&[3, 1, n, n], data)?);
        for (conv, gn) in &self.encoder {
            h = conv.forward(tape, p, h)?;
            h = gn.forward(tape, p, h, Layout::ChannelFirst)?;
            h = tape.silu(h);
        }
        Ok(h)
    }

    /// Per-point features `[N, C]`: every view's patch grid is sampled at
    /// the projection, extended by validity and depth, mapped by the shared
    /// MLP and max-pooled over views.
    pub fn feature_rows(&self, tape: &mut Tape<f32>, p: &Bound, grids: &[Var], poses: &[CameraPose], points: &[Vec3]) -> Result<Var> {
        ensure!(
            !grids.is_empty() && grids.len() == poses.len(),
            Error::InvalidArgument(format!("{} feature grids for {} poses", grids.len(), poses.len()))
        );
        let shape = tape.shape(grids[0]).to_vec();
        ensure!(
            shape.len() == 4 && shape[1] == 1 && shape[2] == shape[3],
            Error::ShapeMismatch(format!("patch grid shape {shape:?}"))
        );
        let (d, pg) = (shape[0], shape[2]);
        let stacked = tape.concat(grids, 1)?;
        let projected = ProjectedPoints::new(poses, points, self.cfg.patch_size, pg);
        let sampled = tape.interpolate(stacked, Arc::new(projected.stencils), Layout::ChannelFirst)?;
        let extra = tape.constant(Tensor::new(&[projected.extra.len() / 2, 2], projected.extra)?);
        let rows = tape.concat(&[sampled, extra], 1)?;
        debug_assert_eq!(tape.shape(rows)[1], d + 2);
        let h = self.mlp.0.forward(tape, p, rows)?;
        let h = tape.silu(h);
        let h = self.mlp.1.forward(tape, p, h)?;
        let h = tape.reshape(h, &[poses.len(), points.len(), self.cfg.channels])?;
        tape.max_axis(h, 0)
    }

    /// Dense feature volume `[C, R, R, R]` over the cell centers of `spec`.
    pub fn dense_volume(&self, tape: &mut Tape<f32>, p: &Bound, grids: &[Var], poses: &[CameraPose], spec: &VolumeSpec) -> Result<Var> {
        let r = spec.resolution;
        let points: Vec<Vec3> = (0..spec.num_cells()).map(|i| spec.cell_center(spec.voxel(i))).collect();
        let rows = self.feature_rows(tape, p, grids, poses, &points)?;
        let cols = tape.transpose2d(rows)?;
        tape.reshape(cols, &[self.cfg.channels, r, r, r])
    }

    /// Stride-2 stages below the top volume, one per further level.
    pub fn dense_pyramid(&self, tape: &mut Tape<f32>, p: &Bound, top: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(top).to_vec();
        ensure!(
            shape.len() == 4 && shape[0] == self.cfg.channels,
            Error::ShapeMismatch(format!("condition volume shape {shape:?}"))
        );
        check_levels(shape[1], self.levels())?;
        let mut out = vec![top];
        for conv in &self.dense_pyramid {
            let h = conv.forward(tape, p, *out.last().expect("non-empty"))?;
            out.push(tape.silu(h));
        }
        Ok(out)
    }

    pub fn sparse_pyramid(&self, tape: &mut Tape<f32>, p: &Bound, top: Var, hier: &SparseHierarchy) -> Result<Vec<Var>> {
        ensure!(
            hier.levels.len() == self.levels(),
            Error::ShapeMismatch(format!(
                "pyramid has {} levels, index hierarchy {}",
                self.levels(),
                hier.levels.len()
            ))
        );
        let mut out = vec![top];
        for (conv, rules) in self.sparse_pyramid.iter().zip(&hier.down) {
            let h = conv.forward(tape, p, *out.last().expect("non-empty"), rules)?;
            out.push(tape.silu(h));
        }
        Ok(out)
    }

    /// `[E]` vector from the input view, the pooled views, or both.
    pub fn global_vector(&self, tape: &mut Tape<f32>, p: &Bound, inputs: &ConditionInputs, grids: Option<&[Var]>) -> Result<Option<Var>> {
        let mut acc = None;
        if self.mode.global {
            let g = self.encode(tape, p, inputs.input_view)?;
            let pooled = pool(tape, g)?;
            let v = self.global_proj.forward(tape, p, pooled)?;
            acc = Some(v);
        }
        if self.mode.multiview == MultiView::Pooled {
            let grids = grids.ok_or_else(|| Error::InvalidArgument("pooled conditioning needs view grids".into()))?;
            let pooled: Vec<Var> = grids.iter().map(|&g| pool(tape, g)).collect::<Result<_>>()?;
            let cat = tape.concat(&pooled, 1)?;
            let v = self.pooled_proj.forward(tape, p, cat)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
        }
        acc.map(|v| {
            let n = tape.shape(v)[1];
            tape.reshape(v, &[n])
        })
        .transpose()
    }

    fn view_grids(&self, tape: &mut Tape<f32>, p: &Bound, inputs: &ConditionInputs) -> Result<Option<Vec<Var>>> {
        if self.mode.multiview == MultiView::Off {
            return Ok(None);
        }
        ensure!(
            inputs.views.len() == inputs.poses.len() && !inputs.views.is_empty(),
            Error::InvalidArgument(format!("{} views for {} poses", inputs.views.len(), inputs.poses.len()))
        );
        Ok(Some(
            inputs.views.iter().map(|v| self.encode(tape, p, v)).collect::<Result<_>>()?,
        ))
    }

    /// Full dense conditioning for a UNet whose top level is `spec`.
    pub fn dense(&self, tape: &mut Tape<f32>, p: &Bound, inputs: &ConditionInputs, spec: &VolumeSpec) -> Result<Conditioning> {
        check_levels(spec.resolution, self.levels())?;
        let grids = self.view_grids(tape, p, inputs)?;
        let pyramid = if self.mode.multiview == MultiView::Local {
            let grids = grids.as_deref().expect("local mode encodes views");
            let top = self.dense_volume(tape, p, grids, inputs.poses, spec)?;
            self.dense_pyramid(tape, p, top)?
        } else {
            (0..self.levels())
                .map(|l| {
                    let r = spec.resolution >> l;
                    tape.constant(Tensor::zeros(&[self.cfg.channels, r, r, r]))
                })
                .collect()
        };
        let global = self.global_vector(tape, p, inputs, grids.as_deref())?;
        Ok(Conditioning { pyramid, global })
    }

    /// Sparse conditioning on the index hierarchy (rows `[N_l, C]`).
    pub fn sparse(&self, tape: &mut Tape<f32>, p: &Bound, inputs: &ConditionInputs, spec: &VolumeSpec, hier: &SparseHierarchy) -> Result<Conditioning> {
        let grids = self.view_grids(tape, p, inputs)?;
        let pyramid = if self.mode.multiview == MultiView::Local {
            let grids = grids.as_deref().expect("local mode encodes views");
            let points: Vec<Vec3> = hier.levels[0].iter().map(|&v| spec.cell_center(v)).collect();
            let top = self.feature_rows(tape, p, grids, inputs.poses, &points)?;
            self.sparse_pyramid(tape, p, top, hier)?
        } else {
            ensure!(
                hier.levels.len() == self.levels(),
                Error::ShapeMismatch("pyramid and index hierarchy level counts differ".into())
            );
            hier.levels
                .iter()
                .map(|l| tape.constant(Tensor::zeros(&[l.len(), self.cfg.channels])))
                .collect()
        };
        let global = self.global_vector(tape, p, inputs, grids.as_deref())?;
        Ok(Conditioning { pyramid, global })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Mean over the spatial positions of `[D, 1, P, P]`, as `[1, D]`.
fn pool(tape: &mut Tape<f32>, grid: Var) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    let d = s[0];
    let flat = tape.reshape(grid, &[d, s[1..].iter().product()])?;
    let m = tape.mean_axis(flat, 1)?;
    tape.reshape(m, &[1, d])
}

fn check_levels(resolution: usize, levels: usize) -> Result<()> {
    ensure!(
        levels >= 1 && resolution % (1 << (levels - 1)) == 0 && resolution >> (levels - 1) >= 1,
        Error::ShapeMismatch(format!("{levels} pyramid levels do not fit resolution {resolution}"))
    );
    Ok(())
}

/// Projections of points into every view, as stencils into the stacked
/// `[D, V, P, P]` grids (view index on the depth axis) and per-row
/// `[valid, depth]` extras. Rows are view-major.
struct ProjectedPoints {
    stencils: Stencils,
    extra: Vec<f32>,
}

impl ProjectedPoints {
    fn new(poses: &[CameraPose], points: &[Vec3], patch: usize, grid: usize) -> Self {
        let mut coords = Vec::with_capacity(poses.len() * points.len());
        let mut extra = Vec::with_capacity(2 * poses.len() * points.len());
        let hi = (grid - 1) as f64;
        for (k, pose) in poses.iter().enumerate() {
            let frame = pose.frame();
            for &pt in points {
                match pose.project_in(&frame, pt).filter(|pr| in_image(pose, pr.u, pr.v)) {
                    Some(pr) => {
                        let x = (pr.u / patch as f64 - 0.5).clamp(0.0, hi);
                        let y = (pr.v / patch as f64 - 0.5).clamp(0.0, hi);
                        coords.push(Some([x, y, k as f64]));
                        extra.push(1.0);
                        extra.push(((pr.depth - pose.radius) / DEPTH_SCALE) as f32);
                    }
                    None => {
                        coords.push(None);
                        extra.extend_from_slice(&[0.0, 0.0]);
                    }
                }
            }
        }
        ProjectedPoints {
            stencils: Stencils::trilinear([poses.len(), grid, grid], &coords),
            extra,
        }
    }
}

fn in_image(pose: &CameraPose, u: f64, v: f64) -> bool {
    let n = pose.resolution as f64;
    (0.0..n).contains(&u) && (0.0..n).contains(&v)
}

/// Width of the rows returned by [`project_colors`].
pub const PROJECTED_COLOR_CHANNELS: usize = 4;

/// Per voxel `[r, g, b, valid]`: the mean of the bilinear color samples over
/// the views the voxel center projects into, and the fraction of such
/// views. Voxels seen by no view get all zeros.
pub fn project_colors(views: &[RenderedView], poses: &[CameraPose], spec: &VolumeSpec, indices: &[Voxel]) -> Result<Vec<f32>> {
    ensure!(
        views.len() == poses.len() && !views.is_empty(),
        Error::InvalidArgument(format!("{} views for {} poses", views.len(), poses.len()))
    );
    let frames: Vec<_> = poses.iter().map(|p| p.frame()).collect();
    let mut out = vec![0.0f32; indices.len() * PROJECTED_COLOR_CHANNELS];
    for (row, &v) in out.chunks_exact_mut(PROJECTED_COLOR_CHANNELS).zip(indices) {
        let pt = spec.cell_center(v);
        let mut sum = [0.0f64; 3];
        let mut seen = 0usize;
        for ((view, pose), frame) in views.iter().zip(poses).zip(&frames) {
            let Some(pr) = pose.project_in(frame, pt).filter(|pr| in_image(pose, pr.u, pr.v)) else {
                continue;
            };
            let c = view.rgb.sample_bilinear(pr.u, pr.v);
            for k in 0..3 {
                sum[k] += c[k] as f64;
            }
            seen += 1;
        }
        if seen > 0 {
            for k in 0..3 {
                row[k] = (sum[k] / seen as f64) as f32;
            }
            row[3] = (seen as f64 / views.len() as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_pose_rig, rasterize, RgbImage, RigParams, Shading};
    use crate::math::Mat3;
    use crate::volume::mesh::uv_sphere;

    const RES: usize = 64;

    fn rig() -> crate::camera::PoseRig {
        make_pose_rig(
            20.0,
            10.0,
            RigParams {
                resolution: RES,
                ..RigParams::default()
            },
        )
        .unwrap()
    }

    fn colored_views(poses: &[CameraPose]) -> Vec<RenderedView> {
        let mut mesh = uv_sphere(Vec3::new(0.05, -0.02, 0.03), 0.3, 12, 24);
        let colors = mesh
            .vertices
            .iter()
            .map(|v| [(v.x + 0.5) as f32, (v.y + 0.5) as f32, (v.z + 0.5) as f32])
            .collect();
        mesh.colors = Some(colors);
        poses.iter().map(|p| rasterize(&mesh, p, Shading::Unlit).unwrap()).collect()
    }

    fn net(mode: ConditionMode, levels: usize) -> (ConditionNet, ParameterStore) {
        let net = ConditionNet::new("cond", ConditionConfig::default(), mode, levels, 16, 6).unwrap();
        let mut store = ParameterStore::new();
        net.init(&mut store, false, &mut crate::rng::from_seed(5)).unwrap();
        (net, store)
    }

    #[test]
    fn encoder_output_shape_and_divisibility() {
        let (net, store) = net(ConditionMode::default(), 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let view = RenderedView::background(128);
        let g = net.encode(&mut tape, &p, &view).unwrap();
        assert_eq!(tape.shape(g), &[32, 1, 8, 8]);
        assert!(net.encode(&mut tape, &p, &RenderedView::background(40)).is_err());
    }

    #[test]
    fn identical_views_give_identical_grids() {
        let (net, store) = net(ConditionMode::default(), 2);
        let views = colored_views(&rig().targets[..1]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = net.encode(&mut tape, &p, &views[0]).unwrap();
        let b = net.encode(&mut tape, &p, &views[0].clone()).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let (net, store) = net(ConditionMode::default(), 2);
        let mut view = RenderedView::background(128);
        view.rgb = RgbImage::filled(128, 128, [0.2, 0.6, 0.9]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let g = net.encode(&mut tape, &p, &view).unwrap();
        let d = tape.data(g);
        // Zero padding reaches only the first row and column of the grid.
        for c in 0..32 {
            let plane = &d[c * 64..(c + 1) * 64];
            for y in 1..8 {
                for x in 1..8 {
                    assert_eq!(plane[y * 8 + x], plane[9], "channel {c} at ({x}, {y})");
                }
            }
        }
    }

    fn feature_volume(net: &ConditionNet, store: &ParameterStore, views: &[RenderedView], poses: &[CameraPose], spec: &VolumeSpec) -> Vec<f32> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let grids: Vec<Var> = views.iter().map(|v| net.encode(&mut tape, &p, v).unwrap()).collect();
        let vol = net.dense_volume(&mut tape, &p, &grids, poses, spec).unwrap();
        assert_eq!(tape.shape(vol), &[16, spec.resolution, spec.resolution, spec.resolution]);
        tape.data(vol).to_vec()
    }

    #[test]
    fn view_permutation_is_bitwise_invariant() {
        let (net, store) = net(ConditionMode::default(), 2);
        let poses = rig().targets;
        let views = colored_views(&poses);
        let spec = VolumeSpec::new(8).unwrap();
        let base = feature_volume(&net, &store, &views, &poses, &spec);
        for perm in [[5, 4, 3, 2, 1, 0], [2, 0, 4, 1, 5, 3]] {
            let v: Vec<RenderedView> = perm.iter().map(|&i| views[i].clone()).collect();
            let p: Vec<CameraPose> = perm.iter().map(|&i| poses[i]).collect();
            assert_eq!(feature_volume(&net, &store, &v, &p, &spec), base);
        }
    }

    #[test]
    fn out_of_frustum_volume_is_constant() {
        let (net, store) = net(ConditionMode::default(), 2);
        let mut pose = rig().targets[0];
        pose.offset.rotation = Mat3::rotation(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI);
        let spec = VolumeSpec::new(8).unwrap();
        assert!((0..spec.num_cells()).all(|i| pose.project(spec.cell_center(spec.voxel(i))).is_none()));
        let views = colored_views(&[pose]);
        let vol = feature_volume(&net, &store, &views, &[pose], &spec);
        let n = spec.num_cells();
        for c in 0..16 {
            let plane = &vol[c * n..(c + 1) * n];
            assert!(plane.iter().all(|&v| v == plane[0] && v.is_finite()));
        }
    }

    #[test]
    fn origin_samples_the_central_patches() {
        let poses = rig().targets;
        let pp = ProjectedPoints::new(&poses, &[Vec3::ZERO], 16, 4);
        for (k, taps) in pp.stencils.taps.iter().enumerate() {
            // Principal point (32, 32) is patch coordinate 1.5 on a 4x4 grid.
            let mut used: Vec<(u32, f64)> = taps.iter().copied().filter(|t| t.1 > 0.0).collect();
            used.sort_by_key(|t| t.0);
            let base = (k * 16) as u32;
            let want = [base + 5, base + 6, base + 9, base + 10];
            assert_eq!(used.iter().map(|t| t.0).collect::<Vec<_>>(), want);
            for (_, w) in used {
                assert!((w - 0.25).abs() < 1e-9, "{w}");
            }
            assert_eq!(pp.extra[2 * k], 1.0);
            assert!(pp.extra[2 * k + 1].abs() < 1e-6);
        }
    }

    #[test]
    fn pyramid_levels_halve_resolution() {
        let (net, store) = net(ConditionMode::default(), 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let top = tape.constant(Tensor::zeros(&[16, 32, 32, 32]));
        let pyr = net.dense_pyramid(&mut tape, &p, top).unwrap();
        let res: Vec<usize> = pyr.iter().map(|&v| tape.shape(v)[1]).collect();
        assert_eq!(res, vec![32, 16, 8, 4]);
        assert!(pyr.iter().all(|&v| tape.data(v).iter().all(|&x| x == 0.0)));
        let small = tape.constant(Tensor::zeros(&[16, 4, 4, 4]));
        assert!(net.dense_pyramid(&mut tape, &p, small).is_err());
    }

    #[test]
    fn sparse_pyramid_follows_hierarchy() {
        let net = ConditionNet::new("cond", ConditionConfig::default(), ConditionMode::default(), 3, 16, 6).unwrap();
        let mut store = ParameterStore::new();
        net.init(&mut store, true, &mut crate::rng::from_seed(1)).unwrap();
        let idx: Vec<Voxel> = (0..8u32).flat_map(|x| (0..3u32).map(move |y| [x, y, 1])).collect();
        let hier = SparseHierarchy::new(idx, 3).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let top = tape.constant(Tensor::full(&[24, 16], 0.5));
        let pyr = net.sparse_pyramid(&mut tape, &p, top, &hier).unwrap();
        let rows: Vec<usize> = pyr.iter().map(|&v| tape.shape(v)[0]).collect();
        assert_eq!(rows, hier.levels.iter().map(Vec::len).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_red_views_project_red() {
        let poses = rig().targets;
        let mut views = colored_views(&poses);
        for v in &mut views {
            v.rgb = RgbImage::filled(RES, RES, [1.0, 0.0, 0.0]);
        }
        let spec = VolumeSpec::new(8).unwrap();
        let idx: Vec<Voxel> = (0..spec.num_cells()).map(|i| spec.voxel(i)).collect();
        let rows = project_colors(&views, &poses, &spec, &idx).unwrap();
        for r in rows.chunks_exact(4) {
            assert_eq!(&r[..3], &[1.0, 0.0, 0.0]);
            assert!(r[3] > 0.0);
        }
    }

    #[test]
    fn unseen_voxel_gets_zero_color() {
        let mut pose = rig().targets[0];
        pose.offset.rotation = Mat3::rotation(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::PI);
        let view = RenderedView::background(RES);
        let spec = VolumeSpec::new(4).unwrap();
        let rows = project_colors(&[view], &[pose], &spec, &[[1, 2, 3]]).unwrap();
        assert_eq!(rows, vec![0.0; 4]);
    }

    #[test]
    fn single_view_matches_bilinear_sample() {
        // Channels linear in the pixel center coordinates: bilinear
        // interpolation reproduces them exactly away from the border.
        let pose = rig().targets[1];
        let mut view = RenderedView::background(RES);
        for y in 0..RES {
            for x in 0..RES {
                let (u, v) = (x as f32 + 0.5, y as f32 + 0.5);
                view.rgb.set_pixel(x, y, [u / 64.0, v / 64.0, 0.25]);
            }
        }
        let spec = VolumeSpec::new(8).unwrap();
        let voxel = [5, 2, 4];
        let pr = pose.project(spec.cell_center(voxel)).unwrap();
        assert!(pr.u > 1.0 && pr.u < 63.0 && pr.v > 1.0 && pr.v < 63.0);
        let rows = project_colors(&[view], &[pose], &spec, &[voxel]).unwrap();
        assert!((rows[0] as f64 - pr.u / 64.0).abs() < 1e-6, "{} vs {}", rows[0], pr.u / 64.0);
        assert!((rows[1] as f64 - pr.v / 64.0).abs() < 1e-6);
        assert!((rows[2] - 0.25).abs() < 1e-7);
        assert_eq!(rows[3], 1.0);
    }

    #[test]
    fn global_vector_has_time_width_and_is_deterministic() {
        let (net, store) = net(ConditionMode::default(), 2);
        let poses = rig().targets;
        let views = colored_views(&poses);
        let inputs = ConditionInputs {
            views: &views,
            poses: &poses,
            input_view: &views[0],
        };
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let g = net.global_vector(&mut tape, &p, &inputs, None).unwrap().unwrap();
            tape.data(g).to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 16);
        assert_eq!(a, run());
        let (off, off_store) = net_with(ConditionMode {
            multiview: MultiView::Local,
            global: false,
        });
        let mut tape = Tape::new();
        let p = off_store.bind(&mut tape);
        assert!(off.global_vector(&mut tape, &p, &inputs, None).unwrap().is_none());
    }

    fn net_with(mode: ConditionMode) -> (ConditionNet, ParameterStore) {
        net(mode, 2)
    }

    #[test]
    fn ablation_modes_zero_the_volume() {
        let poses = rig().targets;
        let views = colored_views(&poses);
        let inputs = ConditionInputs {
            views: &views,
            poses: &poses,
            input_view: &views[0],
        };
        let spec = VolumeSpec::new(8).unwrap();
        for mv in [MultiView::Off, MultiView::Pooled] {
            let (net, store) = net(ConditionMode { multiview: mv, global: true }, 2);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let c = net.dense(&mut tape, &p, &inputs, &spec).unwrap();
            assert!(c.pyramid.iter().all(|&v| tape.data(v).iter().all(|&x| x == 0.0)));
            assert_eq!(tape.shape(c.global.unwrap()), &[16]);
        }
    }
}
