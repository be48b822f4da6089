//! Procedural shape corpus and training samples.

pub mod build;
pub mod sample;
pub mod shapes;

pub use build::{build_corpus, load_sample, plan_corpus, split_ids, Corpus, CorpusConfig, CorpusManifest, ManifestEntry, Split};
pub use sample::{build_sample, render_view, ShapeSample};
pub use shapes::{generate_shape, CsgShape, Primitive};
