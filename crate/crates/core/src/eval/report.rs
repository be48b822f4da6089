//! Per-shape scoring of a prediction directory against a corpus split, and
//! the aggregated report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{rasterize, Shading};
use crate::corpus::{Corpus, ShapeSample, Split};
use crate::error::{ensure, Error, Result};
use crate::volume::io::{read_ply, read_volume, Volume};
use crate::volume::{shell_iou, DenseVolume, TriMesh};

use super::align::{align, AlignConfig};
use super::metrics::{f_score, mask_iou, mask_union, psnr, PSNR_CAP};

pub const REPORT_FORMAT: &str = "lift3d-eval/1";
pub const REPORT_JSON: &str = "eval_report.json";
pub const REPORT_CSV: &str = "eval_report.csv";
pub const CSV_COLUMNS: &str = "shape_id,f_score,precision,recall,shell_iou,psnr,mask_iou,align_before,align_after,degenerate";

/// Per-shape prediction files: `<run>/shapes/<shape_id>/`.
pub const PRED_MESH_FILE: &str = "mesh.ply";
pub const REFINED_MESH_FILE: &str = "refined.ply";
pub const PRED_OCCUPANCY_FILE: &str = "coarse.vxl";

pub fn shape_dir(run: &Path, shape_id: &str) -> PathBuf {
    run.join("shapes").join(shape_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// F-score distance threshold, in units of the normalized extent.
    pub f_threshold: f64,
    pub split: Split,
    /// Mesh file scored in each shape directory.
    pub mesh_file: String,
    /// Seed of every surface sampling.
    pub seed: u64,
    pub align: AlignConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            f_threshold: 0.05,
            split: Split::Val,
            mesh_file: PRED_MESH_FILE.into(),
            seed: 0,
            align: AlignConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.f_threshold > 0.0 && self.f_threshold.is_finite(),
            Error::Config {
                key: "eval.f_threshold".into(),
                message: "must be positive".into(),
            }
        );
        ensure!(
            !self.align.yaw_steps_deg.is_empty() && !self.align.scales.is_empty() && self.align.samples > 0,
            Error::Config {
                key: "eval.align".into(),
                message: "needs at least one yaw, one scale and one sample".into(),
            }
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub shape_id: String,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    /// Missing when the prediction has no coarse occupancy.
    pub shell_iou: Option<f64>,
    /// Per condition view.
    pub psnr: Vec<f64>,
    pub mask_iou: Vec<f64>,
    pub align_before: f64,
    pub align_after: f64,
    /// Empty predicted mesh; geometric scores are 0.
    pub degenerate: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ShapeMetrics {
    pub fn psnr_mean(&self) -> f64 {
        mean(self.psnr.iter().copied()).unwrap_or(0.0)
    }

    pub fn mask_iou_mean(&self) -> f64 {
        mean(self.mask_iou.iter().copied()).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub shapes: usize,
    pub f_score: f64,
    /// Over shapes with an occupancy.
    pub shell_iou: Option<f64>,
    pub psnr: f64,
    pub mask_iou: f64,
}

impl Aggregates {
    pub fn from_shapes(shapes: &[ShapeMetrics]) -> Aggregates {
        Aggregates {
            shapes: shapes.len(),
            f_score: mean(shapes.iter().map(|s| s.f_score)).unwrap_or(0.0),
            shell_iou: mean(shapes.iter().filter_map(|s| s.shell_iou)),
            psnr: mean(shapes.iter().map(ShapeMetrics::psnr_mean)).unwrap_or(0.0),
            mask_iou: mean(shapes.iter().map(ShapeMetrics::mask_iou_mean)).unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config: EvalConfig,
    pub shapes: Vec<ShapeMetrics>,
    /// Split shapes without a prediction.
    pub missing: Vec<String>,
    pub aggregate: Aggregates,
    pub seconds: f64,
}

impl EvalReport {
    pub fn new(config: EvalConfig, shapes: Vec<ShapeMetrics>, missing: Vec<String>, seconds: f64) -> Self {
        EvalReport {
            format: REPORT_FORMAT.into(),
            aggregate: Aggregates::from_shapes(&shapes),
            config,
            shapes,
            missing,
            seconds,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_COLUMNS}\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for s in &self.shapes {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.shape_id,
                s.f_score,
                s.precision,
                s.recall,
                opt(s.shell_iou),
                s.psnr_mean(),
                s.mask_iou_mean(),
                s.align_before,
                s.align_after,
                s.degenerate
            );
        }
        out
    }

    /// Writes the JSON report and the CSV table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_JSON);
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(REPORT_CSV);
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Scores one prediction. The mesh is aligned to the ground truth for the
/// F-score; renders use the unaligned mesh, which shares the camera frame.
pub fn evaluate_shape(pred: &TriMesh, occupancy: Option<&DenseVolume>, gt: &ShapeSample, cfg: &EvalConfig) -> Result<ShapeMetrics> {
    let degenerate = pred.is_empty() || pred.area() == 0.0;
    let (fs, before, after) = if degenerate {
        (f_score(pred, &gt.mesh, cfg.f_threshold, cfg.seed)?, 0.0, 0.0)
    } else {
        let a = align(pred, &gt.mesh, &AlignConfig { seed: cfg.seed, ..cfg.align.clone() })?;
        let moved = a.transform.transform_mesh(pred);
        (f_score(&moved, &gt.mesh, cfg.f_threshold, cfg.seed)?, a.objective_before, a.objective_after)
    };
    let shell = occupancy.map(|o| shell_iou(o, &gt.occ_vol).map(|i| i.value)).transpose()?;
    let shading = if pred.colors.is_some() { Shading::Unlit } else { Shading::Flat };
    let mut psnrs = Vec::with_capacity(gt.views.len());
    let mut ious = Vec::with_capacity(gt.views.len());
    for (view, pose) in gt.views.iter().zip(&gt.poses.targets) {
        let mut render = rasterize(pred, pose, shading)?;
        // Stored views are 8-bit; compare at the same precision.
        render.rgb.quantize();
        let union = mask_union(&render.mask, &view.mask);
        psnrs.push(if union.contains(&true) {
            psnr(&render.rgb, &view.rgb, Some(&union))?
        } else {
            PSNR_CAP
        });
        ious.push(mask_iou(&render.mask, &view.mask)?);
    }
    Ok(ShapeMetrics {
        shape_id: gt.shape_id.clone(),
        f_score: fs.f_score,
        precision: fs.precision,
        recall: fs.recall,
        shell_iou: shell,
        psnr: psnrs,
        mask_iou: ious,
        align_before: before,
        align_after: after,
        degenerate,
    })
}

fn read_occupancy(path: &Path) -> Result<Option<DenseVolume>> {
    if !path.exists() {
        return Ok(None);
    }
    match read_volume(path)? {
        Volume::Dense(v) if v.channels == 1 => Ok(Some(v)),
        _ => Err(Error::format(path, "expected a one-channel dense occupancy")),
    }
}

/// Scores every shape of the configured split that has a prediction under
/// `run`; shapes without one are listed as missing.
pub fn evaluate_run(run: &Path, corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut shapes = Vec::new();
    let mut missing = Vec::new();
    for id in corpus.manifest.ids(cfg.split) {
        let dir = shape_dir(run, id);
        let mesh_path = dir.join(&cfg.mesh_file);
        if !mesh_path.exists() {
            missing.push(id.to_string());
            continue;
        }
        let pred = read_ply(&mesh_path)?;
        let occ = read_occupancy(&dir.join(PRED_OCCUPANCY_FILE))?;
        let gt = corpus.load(id)?;
        shapes.push(evaluate_shape(&pred, occ.as_ref(), &gt, cfg)?);
    }
    Ok(EvalReport::new(cfg.clone(), shapes, missing, start.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RigParams;
    use crate::corpus::{build_sample, generate_shape};
    use crate::volume::VolumeSpec;

    fn sample() -> ShapeSample {
        let mesh = generate_shape(11, 2).unwrap();
        let coarse = VolumeSpec::new(16).unwrap();
        let fine = coarse.refined(1.0, 3.0).unwrap();
        let rig = RigParams {
            resolution: 64,
            ..RigParams::default()
        };
        build_sample("s", &mesh, &coarse, &fine, rig, 3).unwrap()
    }

    fn quick() -> EvalConfig {
        EvalConfig {
            align: AlignConfig {
                samples: 1000,
                ..AlignConfig::default()
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = sample();
        let m = evaluate_shape(&s.mesh, Some(&s.occ_vol), &s, &quick()).unwrap();
        assert_eq!(m.f_score, 100.0);
        assert_eq!(m.shell_iou, Some(1.0));
        assert!(m.mask_iou.iter().all(|&v| v == 1.0));
        assert!(m.psnr.iter().all(|&v| v == PSNR_CAP));
        assert!(m.align_after <= m.align_before);
        assert!(!m.degenerate);
    }

    #[test]
    fn empty_prediction_is_degenerate() {
        let s = sample();
        let m = evaluate_shape(&TriMesh::new(vec![], vec![]), None, &s, &quick()).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.f_score, 0.0);
        assert_eq!(m.shell_iou, None);
        assert!(m.mask_iou.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregates_recompute_from_shapes() {
        let shape = |id: &str, f: f64, iou: Option<f64>, p: Vec<f64>| ShapeMetrics {
            shape_id: id.into(),
            f_score: f,
            precision: f,
            recall: f,
            shell_iou: iou,
            mask_iou: vec![0.5; p.len()],
            psnr: p,
            align_before: 0.1,
            align_after: 0.05,
            degenerate: false,
        };
        let r = EvalReport::new(
            EvalConfig::default(),
            vec![shape("a", 80.0, Some(0.5), vec![20.0, 30.0]), shape("b", 40.0, None, vec![10.0])],
            vec!["c".into()],
            1.0,
        );
        assert_eq!(r.aggregate.f_score, 60.0);
        assert_eq!(r.aggregate.shell_iou, Some(0.5));
        assert_eq!(r.aggregate.psnr, 17.5);
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(Aggregates::from_shapes(&back.shapes), back.aggregate);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("b,40,40,40,,10,0.5,"));
    }
}
