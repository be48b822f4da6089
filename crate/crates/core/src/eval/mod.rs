//! Alignment, geometric and image metrics, and run reports.

pub mod align;
pub mod metrics;
pub mod report;

pub use align::{align, AlignConfig, Alignment, RigidSimilarity};
pub use metrics::{f_score, mask_iou, psnr, FScore, PSNR_CAP};
pub use report::{
    evaluate_run, evaluate_shape, shape_dir, Aggregates, EvalConfig, EvalReport, ShapeMetrics, PRED_MESH_FILE, PRED_OCCUPANCY_FILE,
    REFINED_MESH_FILE, REPORT_CSV, REPORT_JSON,
};
