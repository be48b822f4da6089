use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Layout, Scalar, Stencils, Tape, Tensor, Var};
use crate::camera::{pixel_point, rasterize, CameraPose, RenderedView, Shading, BACKGROUND};
use crate::error::{ensure, Error, Result};
use crate::eval::psnr;
use crate::math::Vec3;
use crate::volume::TriMesh;

use super::field::{sh_basis, ColorField, BASIS, FIELD_CHANNELS};

pub const TRACE_FILE: &str = "refine_trace.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iters: usize,
    /// Initial step of every iteration, relative to the preconditioned
    /// gradient.
    pub lr: f64,
    pub resolution: usize,
    /// Box growth around the mesh, as a fraction of its largest side.
    pub margin: f64,
    /// Step halvings tried before an iteration is skipped.
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iters: 400,
            lr: 0.1,
            resolution: 128,
            margin: 0.05,
            max_halvings: 12,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            key: format!("refine.{key}"),
            message: message.into(),
        };
        ensure!(self.lr > 0.0 && self.lr.is_finite(), bad("lr", "must be positive"));
        ensure!(self.resolution >= 2, bad("resolution", "must be >= 2"));
        ensure!((0.0..=1.0).contains(&self.margin), bad("margin", "must lie in [0, 1]"));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub field: ColorField,
    /// Objective over all views after each iteration.
    pub trace: Vec<f64>,
    /// Objective at initialization.
    pub initial_loss: f64,
    /// Iterations whose step was kept.
    pub accepted: usize,
}

/// Supervised pixels of one view on the compact cell set.
struct ViewTerm {
    stencils: Arc<Stencils>,
    /// `[P, 12]`: the basis value of each channel's basis function.
    basis: Vec<f32>,
    /// `[P, 3]`.
    target: Vec<f32>,
}

impl ViewTerm {
    fn pixels(&self) -> usize {
        self.stencils.len()
    }
}

/// Colors `[P, 3]` of the pixels of `term` under compact field `values`
/// (`[12, M]`).
fn view_colors<S: Scalar>(tape: &mut Tape<S>, values: Var, stencils: Arc<Stencils>, basis: &[f32]) -> Result<Var> {
    let p = stencils.len();
    let rows = tape.interpolate(values, stencils, Layout::ChannelFirst)?;
    let basis: Vec<S> = basis.iter().map(|&b| S::from_f64_lossy(b as f64)).collect();
    let basis = tape.constant(Tensor::new(&[p, FIELD_CHANNELS], basis)?);
    let weighted = tape.mul(rows, basis)?;
    let grouped = tape.reshape(weighted, &[p, BASIS, 3])?;
    tape.sum_axis(grouped, 1)
}

fn view_loss(tape: &mut Tape<f32>, values: Var, term: &ViewTerm) -> Result<Var> {
    let colors = view_colors(tape, values, term.stencils.clone(), &term.basis)?;
    let target = tape.constant(Tensor::new(&[term.pixels(), 3], term.target.clone())?);
    tape.mse(colors, target)
}

fn objective(values: &[f32], m: usize, terms: &[ViewTerm]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[FIELD_CHANNELS, m], values.to_vec())?);
    let mut total = 0.0;
    for term in terms {
        let l = view_loss(&mut tape, v, term)?;
        total += tape.data(l)[0] as f64;
    }
    Ok(total / terms.len() as f64)
}

/// Pixels covered by the render of the fixed mesh and foreground in the
/// supervision view.
fn supervised(render: &RenderedView, view: &RenderedView) -> Vec<bool> {
    render.mask.iter().zip(&view.mask).map(|(&a, &b)| a && b).collect()
}

/// Surface point and viewer direction of every pixel of a render.
fn surface_samples(pose: &CameraPose, render: &RenderedView, mask: &[bool]) -> Vec<(usize, Vec3, Vec3)> {
    let eye = pose.frame().center;
    (0..mask.len())
        .filter(|&i| mask[i])
        .filter_map(|i| pixel_point(pose, render, i).map(|p| (i, p, (eye - p).normalized())))
        .collect()
}

/// Fits a color field to `views` with the geometry of `mesh` held fixed.
/// Each iteration takes a preconditioned gradient step on one view (round
/// robin) and halves the step until the loss over all views does not
/// increase; the trace is therefore non-increasing.
pub fn refine_texture(mesh: &TriMesh, views: &[RenderedView], poses: &[CameraPose], cfg: &RefineConfig) -> Result<Refinement> {
    cfg.validate()?;
    ensure!(!mesh.is_empty(), Error::Degenerate("texture refinement of an empty mesh".into()));
    ensure!(
        views.len() == poses.len() && !views.is_empty(),
        Error::ShapeMismatch(format!("{} views for {} poses", views.len(), poses.len()))
    );
    ensure!(
        views.iter().any(|v| v.foreground_count() > 0),
        Error::Degenerate("all supervision views are background".into())
    );
    let mut field = ColorField::covering(mesh, cfg.resolution, cfg.margin)?;

    // Per-view pixels with dense stencils, then a compact cell numbering.
    let mut raw = Vec::new();
    for (view, pose) in views.iter().zip(poses) {
        ensure!(
            view.resolution() == pose.resolution,
            Error::ShapeMismatch("view and pose resolutions differ".into())
        );
        let render = rasterize(mesh, pose, Shading::Flat)?;
        let samples = surface_samples(pose, &render, &supervised(&render, view));
        if !samples.is_empty() {
            raw.push((view, samples));
        }
    }
    ensure!(
        !raw.is_empty(),
        Error::Degenerate("the mesh covers no foreground pixel of any view".into())
    );
    let mut cells: Vec<u32> = raw
        .iter()
        .flat_map(|(_, s)| s.iter().flat_map(|&(_, p, _)| field.stencil(p)))
        .filter(|&(_, w)| w != 0.0)
        .map(|(c, _)| c)
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let m = cells.len();
    let compact = |c: u32| cells.binary_search(&c).expect("collected cell") as u32;

    let terms: Vec<ViewTerm> = raw
        .iter()
        .map(|(view, samples)| {
            let mut taps = Vec::with_capacity(samples.len());
            let mut basis = Vec::with_capacity(samples.len() * FIELD_CHANNELS);
            let mut target = Vec::with_capacity(samples.len() * 3);
            for &(i, p, d) in samples {
                taps.push(field.stencil(p).map(|(c, w)| if w == 0.0 { (0, 0.0) } else { (compact(c), w) }));
                for y in sh_basis(d) {
                    basis.extend([y as f32; 3]);
                }
                target.extend_from_slice(&view.rgb.data[3 * i..3 * i + 3]);
            }
            ViewTerm {
                stencils: Arc::new(Stencils { n_src: m, taps }),
                basis,
                target,
            }
        })
        .collect();

    // Diagonal preconditioner: per coefficient, the absolute row sum of the
    // Hessian of the all-view objective. Steps up to 1 cannot overshoot.
    let mut diag = vec![0.0f64; FIELD_CHANNELS * m];
    for t in &terms {
        let scale = 2.0 / (3.0 * t.pixels() as f64 * terms.len() as f64);
        for (k, st) in t.stencils.taps.iter().enumerate() {
            let y = &t.basis[k * FIELD_CHANNELS..(k + 1) * FIELD_CHANNELS];
            let spread: f64 = (0..BASIS).map(|b| (y[3 * b] as f64).abs()).sum();
            for &(c, w) in st {
                if w == 0.0 {
                    continue;
                }
                for (ch, &yc) in y.iter().enumerate() {
                    diag[ch * m + c as usize] += scale * w * (yc as f64).abs() * spread;
                }
            }
        }
    }
    let floor = 1e-3 * diag.iter().sum::<f64>() / diag.iter().filter(|&&d| d > 0.0).count().max(1) as f64;

    let n = field.num_cells();
    let mut values = vec![0.0f32; FIELD_CHANNELS * m];
    for ch in 0..FIELD_CHANNELS {
        for (k, &c) in cells.iter().enumerate() {
            values[ch * m + k] = field.data[ch * n + c as usize];
        }
    }
    let initial_loss = objective(&values, m, &terms)?;
    let mut current = initial_loss;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut accepted = 0;
    for it in 0..cfg.iters {
        let term = &terms[it % terms.len()];
        let mut tape = Tape::new();
        let v = tape.param(Tensor::new(&[FIELD_CHANNELS, m], values.clone())?);
        let loss = view_loss(&mut tape, v, term)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(v).ok_or_else(|| Error::Numerical("field received no gradient".into()))?;
        let mut step = cfg.lr;
        for _ in 0..=cfg.max_halvings {
            let candidate: Vec<f32> = values
                .iter()
                .zip(g)
                .zip(&diag)
                .map(|((&x, &gx), &d)| x - (step * gx as f64 / (d + floor)) as f32)
                .collect();
            let value = objective(&candidate, m, &terms)?;
            ensure!(value.is_finite(), Error::Numerical(format!("non-finite refinement loss at iteration {it}")));
            if value <= current {
                values = candidate;
                current = value;
                accepted += 1;
                break;
            }
            step *= 0.5;
        }
        trace.push(current);
    }
    for ch in 0..FIELD_CHANNELS {
        for (k, &c) in cells.iter().enumerate() {
            field.data[ch * n + c as usize] = values[ch * m + k];
        }
    }
    Ok(Refinement {
        field,
        trace,
        initial_loss,
        accepted,
    })
}

/// Renders the field on the fixed mesh: each covered pixel shows the field
/// at its surface point, seen from the camera, clamped to `[0, 1]`.
pub fn render_field(mesh: &TriMesh, field: &ColorField, pose: &CameraPose) -> Result<RenderedView> {
    let mut view = rasterize(mesh, pose, Shading::Flat)?;
    let samples = surface_samples(pose, &view, &view.mask);
    for (i, p, d) in samples {
        let c = field.query(p, d).map(|v| v.clamp(0.0, 1.0));
        view.rgb.data[3 * i..3 * i + 3].copy_from_slice(&c);
    }
    for i in 0..view.mask.len() {
        if !view.mask[i] {
            view.rgb.data[3 * i..3 * i + 3].copy_from_slice(&BACKGROUND);
        }
    }
    Ok(view)
}

/// Mesh with vertex colors from the field, using vertex normals as viewing
/// directions. Geometry is copied unchanged.
pub fn bake(mesh: &TriMesh, field: &ColorField) -> TriMesh {
    let colors = mesh
        .vertices
        .iter()
        .zip(mesh.vertex_normals())
        .map(|(&v, n)| field.query(v, n).map(|c| c.clamp(0.0, 1.0)))
        .collect();
    TriMesh::new(mesh.vertices.clone(), mesh.triangles.clone()).with_colors(colors)
}

/// Mean foreground PSNR over the views, before and after refinement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureScores {
    /// Vertex-color render of the input mesh.
    pub before_db: f64,
    /// Field render.
    pub after_db: f64,
    /// Vertex-color render of the baked mesh.
    pub baked_db: f64,
}

/// PSNR against the supervision on the pixels both the mesh and the view
/// cover; views sharing no such pixel are skipped.
pub fn texture_scores(mesh: &TriMesh, refined: &ColorField, views: &[RenderedView], poses: &[CameraPose]) -> Result<TextureScores> {
    ensure!(
        mesh.colors.is_some(),
        Error::InvalidArgument("texture scores need a mesh with vertex colors".into())
    );
    let baked = bake(mesh, refined);
    let mut sums = [0.0f64; 3];
    let mut count = 0;
    for (view, pose) in views.iter().zip(poses) {
        let before = rasterize(mesh, pose, Shading::Unlit)?;
        let mask = supervised(&before, view);
        if !mask.contains(&true) {
            continue;
        }
        let after = render_field(mesh, refined, pose)?;
        let baked_view = rasterize(&baked, pose, Shading::Unlit)?;
        sums[0] += psnr(&before.rgb, &view.rgb, Some(&mask))?;
        sums[1] += psnr(&after.rgb, &view.rgb, Some(&mask))?;
        sums[2] += psnr(&baked_view.rgb, &view.rgb, Some(&mask))?;
        count += 1;
    }
    ensure!(count > 0, Error::Degenerate("the mesh covers no foreground pixel of any view".into()));
    let n = count as f64;
    Ok(TextureScores {
        before_db: sums[0] / n,
        after_db: sums[1] / n,
        baked_db: sums[2] / n,
    })
}

/// Writes `iteration,loss` rows; iteration 0 is the initial loss.
pub fn write_trace(path: &Path, refinement: &Refinement) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "iteration,loss").map_err(io)?;
    writeln!(w, "0,{}", refinement.initial_loss).map_err(io)?;
    for (i, l) in refinement.trace.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::camera::{make_pose_rig, RigParams};
    use crate::volume::mesh::uv_sphere;

    fn rig(res: usize) -> Vec<CameraPose> {
        make_pose_rig(
            15.0,
            40.0,
            RigParams {
                resolution: res,
                ..RigParams::default()
            },
        )
        .unwrap()
        .targets
    }

    fn sphere(color: impl Fn(Vec3) -> [f32; 3]) -> TriMesh {
        let mesh = uv_sphere(Vec3::new(0.02, 0.0, -0.03), 0.32, 24, 48);
        let colors = mesh.vertices.iter().map(|&v| color(v)).collect();
        mesh.with_colors(colors)
    }

    fn small() -> RefineConfig {
        RefineConfig {
            resolution: 48,
            ..RefineConfig::default()
        }
    }

    #[test]
    fn gray_supervision_is_fitted() {
        let mesh = sphere(|_| [0.7; 3]);
        let poses = rig(64);
        let views: Vec<_> = poses.iter().map(|p| rasterize(&mesh, p, Shading::Unlit).unwrap()).collect();
        let cfg = RefineConfig { iters: 200, ..small() };
        let r = refine_texture(&mesh, &views, &poses, &cfg).unwrap();
        assert!((r.initial_loss - 0.04).abs() < 1e-4, "{}", r.initial_loss);
        let last = *r.trace.last().unwrap();
        assert!(last < 1e-4, "final loss {last}");
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_keep_the_initial_field() {
        let mesh = sphere(|_| [0.2, 0.4, 0.6]);
        let poses = rig(32);
        let views: Vec<_> = poses.iter().map(|p| rasterize(&mesh, p, Shading::Unlit).unwrap()).collect();
        let cfg = RefineConfig { iters: 0, ..small() };
        let r = refine_texture(&mesh, &views, &poses, &cfg).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(r.field, ColorField::covering(&mesh, 48, 0.05).unwrap());
    }

    #[test]
    fn background_supervision_is_rejected() {
        let mesh = sphere(|_| [0.5; 3]);
        let poses = rig(32);
        let views = vec![RenderedView::background(32); poses.len()];
        assert!(refine_texture(&mesh, &views, &poses, &small()).is_err());
    }

    #[test]
    fn trace_never_increases_with_a_large_step() {
        let mesh = sphere(|v| if v.z > 0.0 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.9] });
        let poses = rig(48);
        let views: Vec<_> = poses.iter().map(|p| rasterize(&mesh, p, Shading::Unlit).unwrap()).collect();
        let cfg = RefineConfig {
            iters: 60,
            lr: 50.0,
            ..small()
        };
        let r = refine_texture(&mesh, &views, &poses, &cfg).unwrap();
        assert!(r.trace[0] <= r.initial_loss);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(*r.trace.last().unwrap() < r.initial_loss);
    }

    #[test]
    fn refinement_sharpens_a_color_edge() {
        // Vertex colors blur the boundary over one ring of triangles; the
        // finer grid resolves it.
        let edge = |v: Vec3| if v.x + 0.3 * v.y > 0.05 { [0.95, 0.8, 0.1] } else { [0.1, 0.3, 0.8] };
        let truth = uv_sphere(Vec3::new(0.02, 0.0, -0.03), 0.32, 96, 192);
        let colors = truth.vertices.iter().map(|&v| edge(v)).collect();
        let truth = truth.with_colors(colors);
        let coarse = sphere(edge);
        let poses = rig(96);
        let views: Vec<_> = poses.iter().map(|p| rasterize(&truth, p, Shading::Unlit).unwrap()).collect();
        let cfg = RefineConfig { resolution: 96, ..RefineConfig::default() };
        let r = refine_texture(&coarse, &views, &poses, &cfg).unwrap();
        let s = texture_scores(&coarse, &r.field, &views, &poses).unwrap();
        assert!(s.after_db > s.before_db + 3.0, "{s:?}");
    }

    #[test]
    fn bake_without_view_dependence_ignores_normals() {
        let mesh = sphere(|_| [0.0; 3]);
        let mut field = ColorField::covering(&mesh, 8, 0.05).unwrap();
        let n = field.num_cells();
        for (i, v) in field.data[..3 * n].iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let baked = bake(&mesh, &field);
        assert_eq!(baked.vertices, mesh.vertices);
        assert_eq!(baked.triangles, mesh.triangles);
        for (&v, c) in mesh.vertices.iter().zip(baked.colors.as_ref().unwrap()) {
            assert_eq!(*c, field.query(v, Vec3::ZERO));
        }
    }

    #[test]
    fn baked_colors_are_clamped_queries_along_normals() {
        let mesh = sphere(|_| [0.0; 3]);
        let mut field = ColorField::covering(&mesh, 8, 0.05).unwrap();
        let n = field.num_cells();
        for (i, v) in field.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32 / 50.0) - 0.5 + if i < 3 * n { 0.5 } else { 0.0 };
        }
        assert!(field.has_view_dependence());
        let baked = bake(&mesh, &field);
        let normals = mesh.vertex_normals();
        for ((&v, nrm), c) in mesh.vertices.iter().zip(normals).zip(baked.colors.unwrap()) {
            assert_eq!(c, field.query(v, nrm).map(|x| x.clamp(0.0, 1.0)));
        }
    }

    #[test]
    fn field_render_gradient_matches_finite_differences() {
        let st = Arc::new(Stencils::trilinear(
            [2, 2, 3],
            &[Some([0.3, 0.6, 0.2]), Some([1.7, 0.1, 0.9]), Some([2.0, 1.0, 0.5])],
        ));
        let basis: Vec<f32> = [[1.0, 0.3, -0.2, 0.4], [1.0, -0.1, 0.45, 0.05], [1.0, 0.0, 0.0, -0.48]]
            .iter()
            .flat_map(|y: &[f32; 4]| y.iter().flat_map(|&b| [b; 3]))
            .collect();
        let mut rng = crate::rng::from_seed(4);
        let values = Tensor::new(&[12, 12], (0..144).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let r = gradcheck::check("color_field", &[values], &move |t, v| view_colors(t, v[0], st.clone(), &basis), 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn trace_csv_starts_with_the_initial_loss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACE_FILE);
        let r = Refinement {
            field: ColorField::new(2, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)).unwrap(),
            trace: vec![0.5, 0.25],
            initial_loss: 1.0,
            accepted: 2,
        };
        write_trace(&path, &r).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "iteration,loss\n0,1\n1,0.5\n2,0.25\n");
    }
}
