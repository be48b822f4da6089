//! Run configuration: every module default in one TOML document, plus the
//! ablation variants.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, Split};
use crate::diffusion::{Stage, StageConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ConditionMode, MultiView};
use crate::texture::RefineConfig;

/// File name of the effective configuration written into output
/// directories.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub models: PathBuf,
    pub infer: PathBuf,
    pub refine: PathBuf,
    pub eval: PathBuf,
    pub ablate: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig::under(Path::new("out"))
    }
}

impl PathsConfig {
    /// The standard layout below `out`.
    pub fn under(out: &Path) -> Self {
        PathsConfig {
            corpus: out.join("corpus"),
            models: out.join("models"),
            infer: out.join("infer"),
            refine: out.join("refine"),
            eval: out.join("eval"),
            ablate: out.join("ablate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub split: Split,
    /// Shapes processed; 0 means the whole split.
    pub limit: usize,
    /// Degradation of the condition views, standing in for predicted
    /// multi-view images.
    pub view_degradation: f64,
    /// DDIM steps; 0 means the stage config's `sample_steps`.
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            split: Split::Val,
            limit: 0,
            view_degradation: 0.0,
            stage1_steps: 0,
            stage2_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training-view degradation of the predicted-image variant.
    pub prediction_degradation: f64,
    /// Condition degradation levels at which held-out IoU is reported.
    pub eval_degradations: Vec<f64>,
    /// Held-out shapes scored; 0 means the whole split.
    pub limit: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            prediction_degradation: 0.5,
            eval_degradations: vec![0.0, 0.5],
            limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every module derives its own stream from it.
    pub seed: u64,
    /// Worker threads; 0 uses all cores. 1 is bit-reproducible.
    pub threads: usize,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub infer: InferConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            stage1: StageConfig::for_stage(Stage::Coarse),
            stage2: StageConfig::for_stage(Stage::Fine),
            infer: InferConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn unit_range(key: &str, v: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&v),
        Error::Config {
            key: key.into(),
            message: format!("{v} is outside [0, 1]"),
        }
    );
    Ok(())
}

impl RunConfig {
    /// Parses TOML, rejecting unknown keys, then fills stage defaults and
    /// validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: e.span().map_or_else(|| "<document>".to_string(), |s| locate_key(text, s)),
            message: e.message().to_string(),
        })?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn resolve(&mut self) {
        self.stage1.resolve(Stage::Coarse);
        self.stage2.resolve(Stage::Fine);
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Coarse => &self.stage1,
            Stage::Fine => &self.stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        ensure!(
            self.stage1.unet.widths.len() <= self.corpus.coarse_resolution.trailing_zeros() as usize,
            Error::Config {
                key: "stage1.unet.widths".into(),
                message: format!("too many levels for a {}^3 grid", self.corpus.coarse_resolution),
            }
        );
        ensure!(
            self.stage2.unet.widths.len() <= 1 + self.corpus.coarse_resolution.trailing_zeros() as usize,
            Error::Config {
                key: "stage2.unet.widths".into(),
                message: format!("too many levels for a {}^3 grid", 2 * self.corpus.coarse_resolution),
            }
        );
        unit_range("infer.view_degradation", self.infer.view_degradation)?;
        unit_range("ablation.prediction_degradation", self.ablation.prediction_degradation)?;
        for &d in &self.ablation.eval_degradations {
            unit_range("ablation.eval_degradations", d)?;
        }
        self.refine.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Dotted path of the table key enclosing byte offset `span.start`.
fn locate_key(text: &str, span: std::ops::Range<usize>) -> String {
    let before = &text[..span.start.min(text.len())];
    let table = before
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').to_string())
        })
        .unwrap_or_default();
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let rest = &text[line_start..];
    let key = rest.split(['=', '\n']).next().unwrap_or("").trim().trim_matches('"');
    match (table.is_empty(), key.is_empty() || key.starts_with('[')) {
        (true, _) => key.to_string(),
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Rows of the diffusion ablation: which conditions the stage-1 model sees
/// and how its training views are prepared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationVariant {
    /// Input-view global condition only.
    A,
    /// Mean-pooled per-view features, plus the global condition.
    B,
    /// Local feature volume without the global condition.
    C,
    /// Local and global, trained on degraded views.
    D,
    /// Local and global, clean views, no pose perturbation.
    E,
    /// Local and global, clean views, perturbed poses.
    F,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::A,
        AblationVariant::B,
        AblationVariant::C,
        AblationVariant::D,
        AblationVariant::E,
        AblationVariant::F,
    ];

    pub fn letter(self) -> char {
        match self {
            AblationVariant::A => 'a',
            AblationVariant::B => 'b',
            AblationVariant::C => 'c',
            AblationVariant::D => 'd',
            AblationVariant::E => 'e',
            AblationVariant::F => 'f',
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| s.len() == 1 && s.starts_with(v.letter()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant {s:?}; expected one of a-f")))
    }

    pub fn mode(self) -> ConditionMode {
        let (multiview, global) = match self {
            AblationVariant::A => (MultiView::Off, true),
            AblationVariant::B => (MultiView::Pooled, true),
            AblationVariant::C => (MultiView::Local, false),
            _ => (MultiView::Local, true),
        };
        ConditionMode { multiview, global }
    }

    /// Stage-1 training config of the variant, derived from `base`. Pose
    /// perturbation keeps the base magnitudes only for row f.
    pub fn stage_config(self, base: &StageConfig, ablation: &AblationConfig) -> StageConfig {
        let mut cfg = base.clone();
        cfg.mode = self.mode();
        let aug = &mut cfg.train.augment;
        if self != AblationVariant::F {
            aug.pose_rotation_deg = 0.0;
            aug.pose_translation_frac = 0.0;
        }
        aug.view_degradation = if self == AblationVariant::D {
            ablation.prediction_degradation
        } else {
            0.0
        };
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.stage1.train.target_loss = Some(0.1);
        c.eval.f_threshold = 0.02;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::from_toml("[stage1.train]\nstepz = 3\n").unwrap_err();
        match err {
            Error::Config { key, message } => {
                assert_eq!(key, "stage1.train.stepz");
                assert!(message.contains("stepz"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config { .. })));
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = RunConfig::from_toml("[infer]\nview_degradation = 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "infer.view_degradation"), "{err}");
        let err = RunConfig::from_toml("[stage1.unet]\nwidths = [8, 8, 8, 8, 8, 8]\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "stage1.unet.widths"), "{err}");
    }

    #[test]
    fn partial_stage_tables_keep_stage_defaults() {
        let c = RunConfig::from_toml("[stage2.train]\nsteps = 7\n").unwrap();
        assert_eq!(c.stage2.train.steps, 7);
        assert_eq!(c.stage2.unet.widths, Stage::Fine.default_widths());
    }

    #[test]
    fn variants_change_one_factor_at_a_time() {
        let base = StageConfig::for_stage(Stage::Coarse);
        let abl = AblationConfig::default();
        let cfg = |v: AblationVariant| v.stage_config(&base, &abl);
        let e = cfg(AblationVariant::E);
        assert_eq!(e.train.augment.pose_rotation_deg, 0.0);
        let f = cfg(AblationVariant::F);
        assert_eq!(f.train.augment, base.train.augment);
        assert_eq!(f.mode, e.mode);
        let d = cfg(AblationVariant::D);
        assert_eq!(d.train.augment.view_degradation, 0.5);
        assert_eq!(d.mode, e.mode);
        assert!(!cfg(AblationVariant::C).mode.global);
        assert_eq!(cfg(AblationVariant::A).mode.multiview, MultiView::Off);
        assert_eq!(cfg(AblationVariant::B).mode.multiview, MultiView::Pooled);
        assert_eq!(AblationVariant::parse("d").unwrap(), AblationVariant::D);
        assert!(AblationVariant::parse("g").is_err());
        assert!(AblationVariant::parse("").is_err());
    }
}
