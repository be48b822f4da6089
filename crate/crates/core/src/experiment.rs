//! Corpus-level drivers shared by the command line and the acceptance
//! suite: per-shape inference, held-out stage-1 scoring and ablations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{degrade_views, RenderedView};
use crate::config::{AblationVariant, InferConfig, RunConfig};
use crate::corpus::ShapeSample;
use crate::diffusion::{infer_pipeline, sample_stage1, train_stage1, PipelineOutput, RunReport, StageModel, TrainOutcome};
use crate::error::{Error, Result};
use crate::eval::{shape_dir, PRED_MESH_FILE, PRED_OCCUPANCY_FILE, REFINED_MESH_FILE};
use crate::model::{ConditionInputs, ConditionMode};
use crate::rng::derive;
use crate::texture::{bake, refine_texture, texture_scores, write_trace, RefineConfig, Refinement, TextureScores, TRACE_FILE};
use crate::volume::{marching_cubes_sparse, read_ply, shell_iou, write_ply, write_volume, TriMesh, Volume};
use crate::diffusion::denormalize_fine;

pub const RUN_REPORT_FILE: &str = "report.json";
pub const REFINE_REPORT_FILE: &str = "refine.json";

/// Per-shape seed of inference sampling.
pub fn shape_seed(seed: u64, shape_id: &str) -> u64 {
    derive(seed, &format!("infer/{shape_id}"))
}

/// The six condition views of a sample, degraded by `level` with a
/// per-shape seed. The input view is never degraded.
pub fn condition_views(sample: &ShapeSample, level: f64, seed: u64) -> Result<Vec<RenderedView>> {
    if level == 0.0 {
        return Ok(sample.views.clone());
    }
    degrade_views(&sample.views, level, derive(seed, &format!("degrade/{}", sample.shape_id)))
}

pub fn inputs<'a>(sample: &'a ShapeSample, views: &'a [RenderedView]) -> ConditionInputs<'a> {
    ConditionInputs {
        views,
        poses: &sample.poses.targets,
        input_view: &sample.input_view,
    }
}

/// Full pipeline on one corpus sample.
pub fn infer_sample(stage1: &StageModel, stage2: &StageModel, sample: &ShapeSample, cfg: &InferConfig, seed: u64) -> Result<PipelineOutput> {
    let views = condition_views(sample, cfg.view_degradation, seed)?;
    let steps = (
        if cfg.stage1_steps == 0 { stage1.cfg.sample_steps } else { cfg.stage1_steps },
        if cfg.stage2_steps == 0 { stage2.cfg.sample_steps } else { cfg.stage2_steps },
    );
    infer_pipeline(stage1, stage2, &inputs(sample, &views), shape_seed(seed, &sample.shape_id), Some(steps))
}

/// Shell IoU of sampled stage-1 occupancy against the ground truth, per
/// sample, with condition views degraded by `level`.
pub fn heldout_shell_iou(model: &StageModel, samples: &[ShapeSample], level: f64, seed: u64, steps: usize) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let views = condition_views(s, level, seed)?;
            let occ = sample_stage1(model, &inputs(s, &views), derive(shape_seed(seed, &s.shape_id), "stage1"), steps)?;
            Ok(shell_iou(&occ, &s.occ_vol)?.value)
        })
        .collect()
}

/// Held-out stage-1 scores of one ablation variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub mode: ConditionMode,
    pub train_steps: usize,
    /// Mean loss over the last steps of training.
    pub final_loss: f64,
    pub shapes: Vec<String>,
    pub levels: Vec<AblationLevel>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationLevel {
    /// Condition-view degradation at evaluation.
    pub degradation: f64,
    pub mean_shell_iou: f64,
    pub shell_iou: Vec<f64>,
}

impl AblationResult {
    pub fn at(&self, degradation: f64) -> Option<&AblationLevel> {
        self.levels.iter().find(|l| l.degradation == degradation)
    }
}

/// Trains the variant's stage-1 model on `train` and scores it on `val`.
/// All variants share the training seed, so they differ only in the
/// ablated factor.
pub fn run_ablation(
    variant: AblationVariant,
    cfg: &RunConfig,
    train: &[ShapeSample],
    val: &[ShapeSample],
    out_dir: Option<&std::path::Path>,
) -> Result<(StageModel, TrainOutcome, AblationResult)> {
    let start = Instant::now();
    let stage_cfg = variant.stage_config(&cfg.stage1, &cfg.ablation);
    let seed = derive(cfg.seed, "ablation");
    let (model, outcome) = train_stage1(train, &stage_cfg, seed, out_dir)?;
    let val = if cfg.ablation.limit > 0 && cfg.ablation.limit < val.len() {
        &val[..cfg.ablation.limit]
    } else {
        val
    };
    let mut levels = Vec::new();
    for &degradation in &cfg.ablation.eval_degradations {
        let ious = heldout_shell_iou(&model, val, degradation, cfg.seed, stage_cfg.sample_steps)?;
        levels.push(AblationLevel {
            degradation,
            mean_shell_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
            shell_iou: ious,
        });
    }
    let result = AblationResult {
        variant,
        mode: stage_cfg.mode,
        train_steps: outcome.losses.len(),
        final_loss: outcome.running_mean().unwrap_or(f64::NAN),
        shapes: val.iter().map(|s| s.shape_id.clone()).collect(),
        levels,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, outcome, result))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes mesh, coarse occupancy and run report under `run/shapes/<id>/`.
pub fn save_prediction(run: &Path, shape_id: &str, out: &PipelineOutput) -> Result<()> {
    let dir = shape_dir(run, shape_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_ply(&dir.join(PRED_MESH_FILE), &out.mesh)?;
    write_volume(&dir.join(PRED_OCCUPANCY_FILE), &Volume::Dense(out.occupancy.clone()))?;
    write_json(&dir.join(RUN_REPORT_FILE), &out.report)
}

/// Mesh of the sample's own fine volume: the best a perfect stage 2 could
/// produce, with vertex colors interpolated from the color volume.
pub fn reference_mesh(sample: &ShapeSample) -> Result<TriMesh> {
    let fine = denormalize_fine(&sample.fine_sparse)?;
    marching_cubes_sparse(&fine, 0.0, fine.spec.truncation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub shape_id: String,
    pub scores: TextureScores,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted: usize,
    pub iterations: usize,
    pub seconds: f64,
}

impl RefineReport {
    pub fn gain_db(&self) -> f64 {
        self.scores.after_db - self.scores.before_db
    }
}

/// Refines the texture of `mesh` against the condition views and bakes it.
pub fn refine_shape(mesh: &TriMesh, sample: &ShapeSample, views: &[RenderedView], cfg: &RefineConfig) -> Result<(TriMesh, Refinement, RefineReport)> {
    let start = Instant::now();
    let poses = &sample.poses.targets;
    let refinement = refine_texture(mesh, views, poses, cfg)?;
    let baked = bake(mesh, &refinement.field);
    let seconds = start.elapsed().as_secs_f64();
    let scores = texture_scores(mesh, &refinement.field, views, poses)?;
    let report = RefineReport {
        shape_id: sample.shape_id.clone(),
        scores,
        initial_loss: refinement.initial_loss,
        final_loss: refinement.trace.last().copied().unwrap_or(refinement.initial_loss),
        accepted: refinement.accepted,
        iterations: refinement.trace.len(),
        seconds,
    };
    Ok((baked, refinement, report))
}

/// Refines the prediction stored under `infer_run` and writes the refined
/// mesh, loss trace and report under `out_run`.
pub fn refine_saved(infer_run: &Path, out_run: &Path, sample: &ShapeSample, views: &[RenderedView], cfg: &RefineConfig) -> Result<RefineReport> {
    let src = shape_dir(infer_run, &sample.shape_id).join(PRED_MESH_FILE);
    if !src.exists() {
        return Err(Error::MissingArtifact(format!("predicted mesh {}", src.display())));
    }
    let mesh = read_ply(&src)?;
    let (baked, refinement, report) = refine_shape(&mesh, sample, views, cfg)?;
    let dir = shape_dir(out_run, &sample.shape_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_ply(&dir.join(REFINED_MESH_FILE), &baked)?;
    write_trace(&dir.join(TRACE_FILE), &refinement)?;
    write_json(&dir.join(REFINE_REPORT_FILE), &report)?;
    Ok(report)
}

/// Run report of one shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReportEntry {
    pub shape_id: String,
    #[serde(flatten)]
    pub report: RunReport,
}
