//! Corpus construction, manifest and train/val split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::RigParams;
use crate::error::{ensure, Error, Result};
use crate::volume::VolumeSpec;

use super::sample::{build_sample, draw_input_view, ShapeSample};
use super::shapes::generate_shape;

pub const MANIFEST_FORMAT: &str = "lift3d-corpus/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub coarse_resolution: usize,
    /// Occupancy threshold and SDF truncation, in voxels of the respective
    /// resolution.
    pub tau_voxels: f32,
    pub truncation_voxels: f32,
    pub max_complexity: u32,
    /// Samples per shape, each with its own input view.
    pub augmentations: usize,
    pub val_fraction: f64,
    pub rig: RigParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 288,
            coarse_resolution: 32,
            tau_voxels: 1.0,
            truncation_voxels: 3.0,
            max_complexity: 3,
            augmentations: 1,
            // 32 of 288 shapes held out.
            val_fraction: 1.0 / 9.0,
            rig: RigParams::default(),
        }
    }
}

impl CorpusConfig {
    pub fn specs(&self) -> Result<(VolumeSpec, VolumeSpec)> {
        let r = self.coarse_resolution;
        let vs = 1.0 / r as f32;
        let coarse = VolumeSpec::with_thresholds(r, self.tau_voxels * vs, self.truncation_voxels * vs)?;
        let fine = coarse.refined(self.tau_voxels, self.truncation_voxels)?;
        Ok((coarse, fine))
    }

    pub fn validate(&self) -> Result<()> {
        self.specs()?;
        let bad = |key: &str, message: String| Error::Config {
            key: format!("corpus.{key}"),
            message,
        };
        ensure!(self.n_samples > 0, bad("n_samples", "must be > 0".into()));
        ensure!(
            (1..=5).contains(&self.max_complexity),
            bad("max_complexity", format!("{} outside 1..=5", self.max_complexity))
        );
        ensure!(self.augmentations > 0, bad("augmentations", "must be > 0".into()));
        ensure!(
            (0.0..1.0).contains(&self.val_fraction),
            bad("val_fraction", format!("{} outside [0, 1)", self.val_fraction))
        );
        ensure!(
            self.rig.resolution > 0 && self.rig.radius > 0.0,
            bad("rig", "radius and resolution must be > 0".into())
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape_id: String,
    /// Relative to the corpus root.
    pub dir: String,
    pub files: Vec<String>,
    pub shape_seed: u64,
    pub complexity: u32,
    pub sample_seed: u64,
    pub input_elevation: f64,
    pub input_azimuth: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub seed: u64,
    pub n_samples: usize,
    pub coarse: VolumeSpec,
    pub fine: VolumeSpec,
    pub rig: RigParams,
    pub config: CorpusConfig,
    pub samples: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.shape_id.as_str())
            .collect()
    }

    pub fn entry(&self, shape_id: &str) -> Option<&ManifestEntry> {
        self.samples.iter().find(|e| e.shape_id == shape_id)
    }
}

/// Validation ids: rank by FNV-1a hash of the id (ties by id) and take the
/// lowest `round(n * fraction)`.
pub fn split_ids(ids: &[String], val_fraction: f64) -> Vec<Split> {
    let n_val = (ids.len() as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (crate::rng::fnv1a(ids[i].as_bytes()), ids[i].clone()));
    let mut split = vec![Split::Train; ids.len()];
    for &i in order.iter().take(n_val) {
        split[i] = Split::Val;
    }
    split
}

/// Shape and sample parameters of every corpus entry, without building.
pub fn plan_corpus(cfg: &CorpusConfig, seed: u64) -> Vec<ManifestEntry> {
    let n_shapes = cfg.n_samples.div_ceil(cfg.augmentations);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for s in 0..n_shapes {
        let shape_seed = crate::rng::derive(seed, &format!("shape/{s}"));
        let mut rng = crate::rng::stream(shape_seed, "complexity");
        let complexity = rng.random_range(1..=cfg.max_complexity);
        for a in 0..cfg.augmentations {
            if out.len() == cfg.n_samples {
                break;
            }
            let shape_id = if cfg.augmentations == 1 {
                format!("{s:05}")
            } else {
                format!("{s:05}-{a}")
            };
            let sample_seed = crate::rng::derive(shape_seed, &format!("sample/{a}"));
            let (el, az) = draw_input_view(sample_seed);
            out.push(ManifestEntry {
                dir: format!("samples/{shape_id}"),
                shape_id,
                files: ShapeSample::file_names(),
                shape_seed,
                complexity,
                sample_seed,
                input_elevation: el,
                input_azimuth: az,
                split: Split::Train,
            });
        }
    }
    let ids: Vec<String> = out.iter().map(|e| e.shape_id.clone()).collect();
    for (e, s) in out.iter_mut().zip(split_ids(&ids, cfg.val_fraction)) {
        e.split = s;
    }
    out
}

/// Builds every sample under `out_dir/samples/` and writes the manifest
/// last. Existing sample directories are overwritten.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let (coarse, fine) = cfg.specs()?;
    let entries = plan_corpus(cfg, seed);
    fs::create_dir_all(out_dir.join("samples")).map_err(|e| Error::io(out_dir, e))?;
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let mesh = generate_shape(e.shape_seed, e.complexity)?;
        let sample = build_sample(&e.shape_id, &mesh, &coarse, &fine, cfg.rig, e.sample_seed)?;
        sample.save(&out_dir.join(&e.dir))
    })?;
    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.into(),
        seed,
        n_samples: entries.len(),
        coarse,
        fine,
        rig: cfg.rig,
        config: cfg.clone(),
        samples: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Handle to a built corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    /// Reads and checks the manifest; every listed file must exist.
    pub fn open(root: &Path) -> Result<Corpus> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("corpus manifest {}", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        ensure!(
            manifest.format == MANIFEST_FORMAT,
            Error::format(&path, format!("unsupported corpus format {:?}", manifest.format))
        );
        ensure!(
            manifest.fine.resolution == 2 * manifest.coarse.resolution,
            Error::format(&path, "fine resolution must be twice the coarse resolution")
        );
        ensure!(
            manifest.samples.len() == manifest.n_samples,
            Error::format(&path, "sample count disagrees with the entry list")
        );
        for e in &manifest.samples {
            for f in &e.files {
                let p = root.join(&e.dir).join(f);
                if !p.exists() {
                    return Err(Error::MissingArtifact(format!("corpus file {}", p.display())));
                }
            }
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load(&self, shape_id: &str) -> Result<ShapeSample> {
        let e = self
            .manifest
            .entry(shape_id)
            .ok_or_else(|| Error::MissingArtifact(format!("shape {shape_id} not in corpus")))?;
        let s = load_sample(&self.root.join(&e.dir))?;
        ensure!(
            s.coarse_spec() == self.manifest.coarse && s.fine_spec() == self.manifest.fine,
            Error::ShapeMismatch(format!("sample {shape_id}: specs differ from the manifest"))
        );
        Ok(s)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ShapeSample>> {
        self.manifest.ids(split).iter().map(|id| self.load(id)).collect()
    }
}

pub fn load_sample(dir: &Path) -> Result<ShapeSample> {
    ShapeSample::load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let ids: Vec<String> = (0..8).map(|i| format!("{i:05}")).collect();
        let s = split_ids(&ids, 0.1);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 1);
        assert_eq!(s, split_ids(&ids, 0.1));
        let ids: Vec<String> = (0..288).map(|i| format!("{i:05}")).collect();
        let s = split_ids(&ids, 1.0 / 9.0);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 32);
    }

    #[test]
    fn plan_respects_augmentations() {
        let cfg = CorpusConfig {
            n_samples: 5,
            augmentations: 2,
            ..CorpusConfig::default()
        };
        let plan = plan_corpus(&cfg, 1);
        assert_eq!(plan.len(), 5);
        assert_eq!(plan[0].shape_seed, plan[1].shape_seed);
        assert_ne!(plan[0].sample_seed, plan[1].sample_seed);
        assert_eq!(plan[4].shape_id, "00002-0");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<CorpusConfig>("n_sample = 3").is_err());
        let c: CorpusConfig = toml::from_str("n_samples = 3").unwrap();
        assert_eq!(c.n_samples, 3);
        assert_eq!(c.coarse_resolution, 32);
    }
}
