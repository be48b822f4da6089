//! Fixed-geometry color refinement: a dense color grid with first-order view
//! dependence is fitted to the condition views, then baked onto the mesh.

pub mod field;
pub mod refine;

pub use field::{sh_basis, ColorField, FIELD_CHANNELS};
pub use refine::{bake, refine_texture, render_field, texture_scores, write_trace, RefineConfig, Refinement, TextureScores, TRACE_FILE};
