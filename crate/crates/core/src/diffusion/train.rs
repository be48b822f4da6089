//! Training loops for both stages.

use std::borrow::Cow;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor};
use crate::camera::{degrade_views, perturb_poses, CameraPose, RenderedView};
use crate::corpus::ShapeSample;
use crate::error::{ensure, Error, Result};
use crate::model::ConditionInputs;
use crate::rng::derive;

use super::corrupt::corrupt_occupancy;
use super::stage::{encode_occupancy, fine_targets, loss_x0, projected_color_tensor, AugmentConfig, Stage, StageConfig, StageModel};

/// Training log of one stage inside its output directory.
pub fn train_log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("train_log_stage{}.csv", stage.number()))
}
const TRAIN_LOG_HEADER: &str = "step,loss,lr,wall_time_s";
/// Window of the running mean compared against the target loss.
pub const LOSS_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Mean loss of each optimizer step.
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn running_mean(&self) -> Option<f64> {
        let n = self.losses.len();
        (n > 0).then(|| {
            let w = &self.losses[n.saturating_sub(LOSS_WINDOW)..];
            w.iter().sum::<f64>() / w.len() as f64
        })
    }
}

/// Condition views and cameras after augmentation.
pub struct Augmented<'a> {
    pub views: Cow<'a, [RenderedView]>,
    pub poses: Vec<CameraPose>,
}

impl<'a> Augmented<'a> {
    pub fn new(sample: &'a ShapeSample, aug: &AugmentConfig, seed: u64) -> Result<Self> {
        let rig = perturb_poses(
            &sample.poses,
            aug.pose_rotation_deg,
            aug.pose_translation_frac,
            derive(seed, "pose"),
        )?;
        let views = if aug.view_degradation > 0.0 {
            Cow::Owned(degrade_views(&sample.views, aug.view_degradation, derive(seed, "degrade"))?)
        } else {
            Cow::Borrowed(sample.views.as_slice())
        };
        Ok(Augmented { views, poses: rig.targets })
    }

    pub fn inputs<'b>(&'b self, sample: &'b ShapeSample) -> ConditionInputs<'b> {
        ConditionInputs {
            views: &self.views,
            poses: &self.poses,
            input_view: &sample.input_view,
        }
    }
}

/// Loss of one training volume, with gradients accumulated into the store.
pub fn train_example(model: &mut StageModel, sample: &ShapeSample, seed: u64) -> Result<f64> {
    let aug = Augmented::new(sample, &model.cfg.train.augment, seed)?;
    let inputs = aug.inputs(sample);
    let mut rng = crate::rng::stream(seed, "noise");
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let loss = match model.stage {
        Stage::Coarse => {
            let x0 = encode_occupancy(&sample.occ_vol)?;
            let cond = model.condition(&mut tape, &p, &inputs, None)?;
            let m = &*model;
            loss_x0(&mut tape, &m.schedule, &x0, &mut rng, |tape, xt, t| {
                m.denoise(tape, &p, xt, t, &cond, None, None)
            })?
            .0
        }
        Stage::Fine => {
            let gt = &sample.fine_sparse;
            let indices = corrupt_occupancy(
                &gt.indices,
                gt.spec.resolution,
                model.cfg.train.augment.occupancy_flip,
                derive(seed, "corrupt"),
            )?;
            let targets = fine_targets(sample, &indices)?;
            let x0 = Tensor::new(&[indices.len(), gt.width], targets)?;
            let colors = projected_color_tensor(&inputs, &gt.spec, &indices)?;
            let hier = model.hierarchy(indices)?;
            let cond = model.condition(&mut tape, &p, &inputs, Some(&hier))?;
            let colors = tape.constant(colors);
            let m = &*model;
            loss_x0(&mut tape, &m.schedule, &x0, &mut rng, |tape, xt, t| {
                m.denoise(tape, &p, xt, t, &cond, Some(&hier), Some(colors))
            })?
            .0
        }
    };
    let value = tape.data(loss)[0] as f64;
    ensure!(value.is_finite(), Error::Numerical(format!("non-finite training loss {value}")));
    let grads = tape.backward(loss)?;
    model.store.accumulate(&p, &grads);
    Ok(value)
}

fn check_samples(model: &StageModel, samples: &[ShapeSample]) -> Result<()> {
    ensure!(!samples.is_empty(), Error::InvalidArgument("no training samples".into()));
    for s in samples {
        let spec = match model.stage {
            Stage::Coarse => s.coarse_spec(),
            Stage::Fine => s.fine_spec(),
        };
        ensure!(
            spec == model.spec,
            Error::ShapeMismatch(format!(
                "sample {} has a {}^3 grid, stage {} model expects {}^3",
                s.shape_id,
                spec.resolution,
                model.stage.number(),
                model.spec.resolution
            ))
        );
    }
    Ok(())
}

struct TrainLog {
    file: File,
    path: PathBuf,
}

impl TrainLog {
    /// A model that has not taken a step starts a new log; otherwise rows
    /// are appended.
    fn create(dir: &Path, stage: Stage, restart: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = train_log_path(dir, stage);
        let fresh = restart || !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(TrainLog { file, path })
    }

    fn row(&mut self, step: u64, loss: f64, lr: f64, wall: f64) -> Result<()> {
        writeln!(self.file, "{step},{loss},{lr},{wall:.3}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `cfg.train.steps` optimizer steps (fewer when the target loss is
/// reached). With an output directory, appends to the training log and
/// writes checkpoints periodically and at the end.
pub fn train_model(model: &mut StageModel, samples: &[ShapeSample], seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    check_samples(model, samples)?;
    let cfg = model.cfg.train.clone();
    let mut log = out_dir
        .map(|d| TrainLog::create(d, model.stage, model.store.step() == 0))
        .transpose()?;
    let mut rng = crate::rng::stream(seed, &format!("train/stage{}", model.stage.number()));
    let start = Instant::now();
    let mut outcome = TrainOutcome {
        losses: Vec::with_capacity(cfg.steps),
        stopped_early: false,
    };
    for step in 0..cfg.steps {
        let mut total = 0.0;
        for _ in 0..cfg.accumulate {
            let pick = rng.random_range(0..samples.len());
            let example_seed: u64 = rng.random();
            total += train_example(model, &samples[pick], example_seed)?;
        }
        model.store.adam_step(&cfg.adam)?;
        let loss = total / cfg.accumulate as f64;
        outcome.losses.push(loss);
        if let Some(log) = &mut log {
            log.row(model.store.step(), loss, cfg.adam.lr, start.elapsed().as_secs_f64())?;
        }
        if let Some(dir) = out_dir {
            if (step + 1) % cfg.checkpoint_every == 0 {
                model.save(dir)?;
            }
        }
        if let Some(target) = cfg.target_loss {
            if outcome.losses.len() >= LOSS_WINDOW && outcome.running_mean().expect("non-empty") < target {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }
    Ok(outcome)
}

/// Fresh stage-1 model trained on `samples`.
pub fn train_stage1(samples: &[ShapeSample], cfg: &StageConfig, seed: u64, out_dir: Option<&Path>) -> Result<(StageModel, TrainOutcome)> {
    train_stage(Stage::Coarse, samples, cfg, seed, out_dir)
}

/// Fresh stage-2 model trained on `samples`.
pub fn train_stage2(samples: &[ShapeSample], cfg: &StageConfig, seed: u64, out_dir: Option<&Path>) -> Result<(StageModel, TrainOutcome)> {
    train_stage(Stage::Fine, samples, cfg, seed, out_dir)
}

fn train_stage(stage: Stage, samples: &[ShapeSample], cfg: &StageConfig, seed: u64, out_dir: Option<&Path>) -> Result<(StageModel, TrainOutcome)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let spec = match stage {
        Stage::Coarse => first.coarse_spec(),
        Stage::Fine => first.fine_spec(),
    };
    let mut model = StageModel::new(stage, cfg.clone(), spec, seed)?;
    let outcome = train_model(&mut model, samples, seed, out_dir)?;
    Ok((model, outcome))
}
