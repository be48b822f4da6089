//! Shared fixtures of the benchmarks.

use lift3d::corpus::{build_sample, generate_shape, CorpusConfig, ShapeSample};

/// One sample at the default corpus resolutions.
pub fn default_sample() -> ShapeSample {
    let cfg = CorpusConfig::default();
    let (coarse, fine) = cfg.specs().expect("default specs are valid");
    let mesh = generate_shape(3, 2).expect("shape generates");
    build_sample("bench", &mesh, &coarse, &fine, cfg.rig, 1).expect("sample builds")
}
