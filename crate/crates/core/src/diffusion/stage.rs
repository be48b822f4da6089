//! Stage models: configuration, parameters, checkpoints and the forward
//! pass from a noisy signal to a clean prediction.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Bound, ParameterStore, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::model::{
    project_colors, ConditionConfig, ConditionInputs, ConditionMode, ConditionNet, Conditioning, Grid,
    SparseHierarchy, UNet, UNetConfig, PROJECTED_COLOR_CHANNELS,
};
use crate::rng::Rng;
use crate::volume::grid::Voxel;
use crate::volume::{DenseVolume, VolumeSpec};

use super::corrupt::face_neighbors;
use super::schedule::{gaussian, NoiseSchedule, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Dense occupancy at the coarse resolution.
    Coarse,
    /// Sparse SDF and color at the fine resolution.
    Fine,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Coarse => 1,
            Stage::Fine => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::Coarse),
            2 => Ok(Stage::Fine),
            _ => Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    /// Channels of the diffused signal.
    pub fn channels(self) -> usize {
        match self {
            Stage::Coarse => 1,
            Stage::Fine => crate::corpus::sample::FINE_CHANNELS,
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Stage::Coarse => vec![8, 16, 32, 64],
            Stage::Fine => vec![8, 16, 32, 32, 64],
        }
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("stage{}.ckpt", self.number()))
    }

    pub fn meta_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("stage{}.json", self.number()))
    }
}

/// Training-time robustness augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Maximum random rotation of each condition camera, degrees.
    pub pose_rotation_deg: f64,
    /// Maximum camera translation as a fraction of the rig radius.
    pub pose_translation_frac: f64,
    /// Stage-2 index corruption probability.
    pub occupancy_flip: f64,
    /// Degradation level applied to the condition views (0 = clean).
    pub view_degradation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pose_rotation_deg: 5.0,
            pose_translation_frac: 0.02,
            occupancy_flip: 0.05,
            view_degradation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Volumes per optimizer step.
    pub accumulate: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    /// Stop once the mean loss of the last 20 steps drops below this.
    pub target_loss: Option<f64>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            accumulate: 4,
            adam: AdamConfig::default(),
            checkpoint_every: 250,
            target_loss: None,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// An empty width list means the stage default.
    pub unet: UNetConfig,
    pub condition: ConditionConfig,
    pub mode: ConditionMode,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample_steps: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            unet: UNetConfig {
                widths: Vec::new(),
                ..UNetConfig::default()
            },
            condition: ConditionConfig::default(),
            mode: ConditionMode::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample_steps: 50,
        }
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let mut c = StageConfig::default();
        c.resolve(stage);
        c
    }

    /// Fills stage-dependent defaults.
    pub fn resolve(&mut self, stage: Stage) {
        if self.unet.widths.is_empty() {
            self.unet.widths = stage.default_widths();
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            key: format!("{key}.{field}"),
            message,
        };
        self.unet.validate(&format!("{key}.unet"))?;
        self.condition.validate()?;
        NoiseSchedule::new(&self.schedule).map_err(|e| bad("schedule", e.to_string()))?;
        ensure!(
            (1..=self.schedule.steps).contains(&self.sample_steps),
            bad("sample_steps", format!("must lie in 1..={}", self.schedule.steps))
        );
        let t = &self.train;
        ensure!(t.accumulate >= 1, bad("train.accumulate", "must be >= 1".into()));
        ensure!(t.checkpoint_every >= 1, bad("train.checkpoint_every", "must be >= 1".into()));
        ensure!(t.adam.lr >= 0.0, bad("train.adam.lr", "must be >= 0".into()));
        let a = &t.augment;
        ensure!(
            a.pose_rotation_deg >= 0.0 && a.pose_translation_frac >= 0.0,
            bad("train.augment", "pose perturbations must be >= 0".into())
        );
        ensure!(
            (0.0..=super::corrupt::MAX_FLIP).contains(&a.occupancy_flip),
            bad("train.augment.occupancy_flip", format!("must lie in [0, {}]", super::corrupt::MAX_FLIP))
        );
        ensure!(
            (0.0..=1.0).contains(&a.view_degradation),
            bad("train.augment.view_degradation", "must lie in [0, 1]".into())
        );
        Ok(())
    }
}

/// Contents of `stage{n}.json` next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageMeta {
    pub stage: Stage,
    pub spec: VolumeSpec,
    pub config: StageConfig,
}

/// A UNet, its condition networks and their parameters.
#[derive(Clone, Debug)]
pub struct StageModel {
    pub stage: Stage,
    pub cfg: StageConfig,
    pub spec: VolumeSpec,
    pub cond: ConditionNet,
    pub unet: UNet,
    pub store: ParameterStore,
    pub schedule: NoiseSchedule,
}

/// Condition values detached from any tape, reused across sampling steps.
#[derive(Clone, Debug)]
pub struct FrozenCondition {
    pub pyramid: Vec<Tensor<f32>>,
    pub global: Option<Tensor<f32>>,
}

impl FrozenCondition {
    pub fn attach(&self, tape: &mut Tape<f32>) -> Conditioning {
        Conditioning {
            pyramid: self.pyramid.iter().map(|t| tape.constant(t.clone())).collect(),
            global: self.global.as_ref().map(|t| tape.constant(t.clone())),
        }
    }
}

impl StageModel {
    pub fn new(stage: Stage, mut cfg: StageConfig, spec: VolumeSpec, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(stage, &mut cfg, spec)?;
        let mut rng = crate::rng::stream(seed, &format!("init/stage{}", stage.number()));
        model.cond.init(&mut model.store, stage == Stage::Fine, &mut rng)?;
        model.unet.init(&mut model.store, &mut rng)?;
        Ok(model)
    }

    fn skeleton(stage: Stage, cfg: &mut StageConfig, spec: VolumeSpec) -> Result<Self> {
        cfg.resolve(stage);
        let key = format!("stage{}", stage.number());
        cfg.validate(&key)?;
        spec.validate()?;
        let levels = cfg.unet.levels();
        ensure!(
            spec.resolution % (1 << (levels - 1)) == 0,
            Error::Config {
                key: format!("{key}.unet.widths"),
                message: format!("{levels} levels do not divide resolution {}", spec.resolution),
            }
        );
        let cond = ConditionNet::new("cond", cfg.condition.clone(), cfg.mode, levels, cfg.unet.time_dim, crate::camera::pose::TARGET_VIEWS)?;
        let (sparse, extra) = match stage {
            Stage::Coarse => (false, 0),
            Stage::Fine => (true, PROJECTED_COLOR_CHANNELS),
        };
        let unet = UNet::new(
            "unet",
            cfg.unet.clone(),
            sparse,
            stage.channels(),
            stage.channels(),
            cfg.condition.channels,
            extra,
        )?;
        Ok(StageModel {
            stage,
            cfg: cfg.clone(),
            spec,
            cond,
            unet,
            store: ParameterStore::new(),
            schedule: NoiseSchedule::new(&cfg.schedule)?,
        })
    }

    pub fn meta(&self) -> StageMeta {
        StageMeta {
            stage: self.stage,
            spec: self.spec,
            config: self.cfg.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = self.stage.meta_path(dir);
        let text = serde_json::to_string_pretty(&self.meta()).expect("meta serializes");
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        self.store.save(&self.stage.checkpoint_path(dir))
    }

    pub fn load(dir: &Path, stage: Stage) -> Result<Self> {
        let meta_path = stage.meta_path(dir);
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(format!("stage {} model {}", stage.number(), meta_path.display())));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut meta: StageMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        ensure!(
            meta.stage == stage,
            Error::format(&meta_path, format!("holds stage {}, expected {}", meta.stage.number(), stage.number()))
        );
        let mut model = Self::skeleton(stage, &mut meta.config, meta.spec)?;
        let reference = Self::new(stage, meta.config.clone(), meta.spec, 0)?;
        let ckpt = stage.checkpoint_path(dir);
        let store = ParameterStore::load(&ckpt)?;
        ensure!(
            store.same_layout(&reference.store),
            Error::format(&ckpt, "parameter layout does not match the stage config")
        );
        model.store = store;
        Ok(model)
    }

    /// Condition on a fresh tape position. `hier` is required for stage 2.
    pub fn condition(&self, tape: &mut Tape<f32>, p: &Bound, inputs: &ConditionInputs, hier: Option<&SparseHierarchy>) -> Result<Conditioning> {
        match (self.stage, hier) {
            (Stage::Coarse, _) => self.cond.dense(tape, p, inputs, &self.spec),
            (Stage::Fine, Some(h)) => self.cond.sparse(tape, p, inputs, &self.spec, h),
            (Stage::Fine, None) => Err(Error::InvalidArgument("stage 2 needs an index hierarchy".into())),
        }
    }

    pub fn freeze_condition(&self, inputs: &ConditionInputs, hier: Option<&SparseHierarchy>) -> Result<FrozenCondition> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let c = self.condition(&mut tape, &p, inputs, hier)?;
        Ok(FrozenCondition {
            pyramid: c.pyramid.iter().map(|&v| tape.value(v).clone()).collect(),
            global: c.global.map(|v| tape.value(v).clone()),
        })
    }

    /// Shape of the diffused tensor.
    pub fn signal_shape(&self, hier: Option<&SparseHierarchy>) -> Result<Vec<usize>> {
        let c = self.stage.channels();
        match (self.stage, hier) {
            (Stage::Coarse, _) => {
                let r = self.spec.resolution;
                Ok(vec![c, r, r, r])
            }
            (Stage::Fine, Some(h)) => Ok(vec![h.levels[0].len(), c]),
            (Stage::Fine, None) => Err(Error::InvalidArgument("stage 2 needs an index hierarchy".into())),
        }
    }

    /// Clean-signal prediction for `x_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        x_t: Var,
        t: usize,
        cond: &Conditioning,
        hier: Option<&SparseHierarchy>,
        colors: Option<Var>,
    ) -> Result<Var> {
        let grid = match (self.stage, hier) {
            (Stage::Coarse, _) => Grid::Dense,
            (Stage::Fine, Some(h)) => Grid::Sparse(h),
            (Stage::Fine, None) => return Err(Error::InvalidArgument("stage 2 needs an index hierarchy".into())),
        };
        self.unet.forward(tape, p, x_t, t as f64, cond, grid, colors)
    }

    /// Builds the sparse index hierarchy for stage-2 indices.
    pub fn hierarchy(&self, indices: Vec<Voxel>) -> Result<SparseHierarchy> {
        SparseHierarchy::new(indices, self.cfg.unet.levels())
    }
}

/// Occupancy as a `[1, R, R, R]` tensor of ±1.
pub fn encode_occupancy(occ: &DenseVolume) -> Result<Tensor<f32>> {
    ensure!(occ.channels == 1, Error::ShapeMismatch("occupancy must have one channel".into()));
    let r = occ.spec.resolution;
    Tensor::new(
        &[1, r, r, r],
        occ.data.iter().map(|&v| if v > 0.5 { 1.0 } else { -1.0 }).collect(),
    )
}

/// Thresholds a ±1 signal at 0.
pub fn decode_occupancy(spec: VolumeSpec, x: &[f32]) -> Result<DenseVolume> {
    DenseVolume::from_data(spec, 1, x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
}

/// Network-side encoding of projected colors: RGB to `[-1, 1]`, validity
/// unchanged.
pub fn encode_projected_colors(rows: &[f32]) -> Vec<f32> {
    rows.chunks_exact(PROJECTED_COLOR_CHANNELS)
        .flat_map(|r| [2.0 * r[0] - 1.0, 2.0 * r[1] - 1.0, 2.0 * r[2] - 1.0, r[3]])
        .collect()
}

/// Projected colors of `indices`, encoded, as a `[N, 4]` tensor.
pub fn projected_color_tensor(inputs: &ConditionInputs, spec: &VolumeSpec, indices: &[Voxel]) -> Result<Tensor<f32>> {
    let rows = project_colors(inputs.views, inputs.poses, spec, indices)?;
    Tensor::new(&[indices.len(), PROJECTED_COLOR_CHANNELS], encode_projected_colors(&rows))
}

/// Stage-2 targets on an arbitrary index set: rows present in the ground
/// truth are copied; other rows get the mesh SDF and the color of a face
/// neighbor in the ground truth (or gray if none).
pub fn fine_targets(sample: &crate::corpus::ShapeSample, indices: &[Voxel]) -> Result<Vec<f32>> {
    let gt = &sample.fine_sparse;
    let w = gt.width;
    let lookup: HashMap<Voxel, usize> = gt.indices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let missing: Vec<Voxel> = indices.iter().copied().filter(|v| !lookup.contains_key(v)).collect();
    let sdf = if missing.is_empty() {
        Vec::new()
    } else {
        crate::volume::compute_sdf_at(&sample.mesh, &gt.spec, &missing)?
    };
    let mut out = Vec::with_capacity(indices.len() * w);
    let mut k = 0;
    for &v in indices {
        if let Some(&i) = lookup.get(&v) {
            out.extend_from_slice(gt.value(i));
            continue;
        }
        out.push(sdf[k]);
        k += 1;
        let color = face_neighbors(v, gt.spec.resolution)
            .find_map(|n| lookup.get(&n))
            .map(|&i| [gt.value(i)[1], gt.value(i)[2], gt.value(i)[3]])
            .unwrap_or([0.0; 3]);
        out.extend_from_slice(&color);
    }
    Ok(out)
}

/// Denoising loss `mean((f(x_t, t) - x0)^2)` with `t ~ U{1..T}` and
/// Gaussian `eps`. Returns the loss and the drawn timestep.
pub fn loss_x0(
    tape: &mut Tape<f32>,
    schedule: &NoiseSchedule,
    x0: &Tensor<f32>,
    rng: &mut Rng,
    f: impl FnOnce(&mut Tape<f32>, Var, usize) -> Result<Var>,
) -> Result<(Var, usize)> {
    let t = rng.random_range(1..=schedule.len());
    let eps = gaussian(x0.len(), rng);
    let xt = schedule.q_sample(&x0.data, t, &eps)?;
    let xt = tape.constant(Tensor::new(&x0.shape, xt)?);
    let pred = f(tape, xt, t)?;
    ensure!(
        tape.shape(pred) == x0.shape.as_slice(),
        Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", tape.shape(pred), x0.shape))
    );
    let target = tape.constant(x0.clone());
    Ok((tape.mse(pred, target)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occupancy_target() -> Tensor<f32> {
        let data = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        Tensor::new(&[1, 4, 4, 4], data).unwrap()
    }

    #[test]
    fn oracle_network_has_zero_loss() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = occupancy_target();
        let mut rng = crate::rng::from_seed(1);
        let mut tape = Tape::new();
        let target = x0.clone();
        let (l, _) = loss_x0(&mut tape, &s, &x0, &mut rng, |tape, _, _| Ok(tape.constant(target))).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);
    }

    #[test]
    fn zero_network_has_unit_loss() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = occupancy_target();
        let mut rng = crate::rng::from_seed(1);
        let mut tape = Tape::new();
        let (l, _) = loss_x0(&mut tape, &s, &x0, &mut rng, |tape, _, _| {
            Ok(tape.constant(Tensor::zeros(&[1, 4, 4, 4])))
        })
        .unwrap();
        assert!((tape.data(l)[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn occupancy_encoding_round_trips() {
        let spec = VolumeSpec::new(4).unwrap();
        let data: Vec<f32> = (0..64).map(|i| (i % 2) as f32).collect();
        let occ = DenseVolume::from_data(spec, 1, data).unwrap();
        let enc = encode_occupancy(&occ).unwrap();
        assert!(enc.data.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(decode_occupancy(spec, &enc.data).unwrap(), occ);
    }

    #[test]
    fn stage_defaults_validate() {
        for stage in [Stage::Coarse, Stage::Fine] {
            let cfg = StageConfig::for_stage(stage);
            cfg.validate("stage").unwrap();
            assert_eq!(cfg.unet.widths, stage.default_widths());
        }
        let mut bad = StageConfig::for_stage(Stage::Coarse);
        bad.train.augment.occupancy_flip = 0.5;
        assert!(matches!(bad.validate("stage1"), Err(Error::Config { key, .. }) if key == "stage1.train.augment.occupancy_flip"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StageConfig::for_stage(Stage::Coarse);
        cfg.unet.widths = vec![8, 8];
        let m = StageModel::new(Stage::Coarse, cfg, VolumeSpec::new(8).unwrap(), 3).unwrap();
        m.save(dir.path()).unwrap();
        let back = StageModel::load(dir.path(), Stage::Coarse).unwrap();
        assert_eq!(back.store, m.store);
        assert!(matches!(StageModel::load(dir.path(), Stage::Fine), Err(Error::MissingArtifact(_))));
    }
}
