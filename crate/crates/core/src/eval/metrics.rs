use crate::camera::RgbImage;
use crate::error::{ensure, Error, Result};
use crate::volume::sdf::Bvh;
use crate::volume::TriMesh;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`. With a mask,
/// only masked pixels count. Identical inputs give [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&[bool]>) -> Result<f64> {
    ensure!(
        a.width == b.width && a.height == b.height,
        Error::ShapeMismatch("PSNR needs equal resolutions".into())
    );
    if let Some(m) = mask {
        ensure!(
            m.len() == a.width * a.height,
            Error::ShapeMismatch("mask size differs from image".into())
        );
    }
    let (mut se, mut count) = (0.0f64, 0usize);
    for p in 0..a.width * a.height {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            let d = a.data[p * 3 + c] as f64 - b.data[p * 3 + c] as f64;
            se += d * d;
        }
        count += 3;
    }
    ensure!(count > 0, Error::Degenerate("PSNR over an empty mask".into()));
    let mse = se / count as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    })
}

/// Union of two masks, for masked PSNR.
pub fn mask_union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(&x, &y)| x || y).collect()
}

/// Intersection over union of two foreground masks; 1.0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Error::ShapeMismatch("mask IoU needs equal sizes".into())
    );
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// F-score breakdown, percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    /// A mesh was empty; all fields are 0.
    pub degenerate: bool,
}

pub const F_SCORE_SAMPLES: usize = 10_000;

/// Precision: share of `pred` surface samples within `threshold` of the
/// `gt` surface. Recall swaps the roles. Meshes must already be aligned.
pub fn f_score(pred: &TriMesh, gt: &TriMesh, threshold: f64, seed: u64) -> Result<FScore> {
    if pred.is_empty() || gt.is_empty() || pred.area() == 0.0 || gt.area() == 0.0 {
        return Ok(FScore {
            f_score: 0.0,
            precision: 0.0,
            recall: 0.0,
            degenerate: true,
        });
    }
    ensure!(
        threshold > 0.0,
        Error::InvalidArgument(format!("F-score threshold {threshold} must be > 0"))
    );
    let within = |from: &TriMesh, to: &TriMesh, label: &str| -> Result<f64> {
        let mut rng = crate::rng::stream(seed, label);
        let samples = from.sample_surface(F_SCORE_SAMPLES, &mut rng)?;
        let bvh = Bvh::new(to);
        let t2 = threshold * threshold;
        let hits = samples
            .iter()
            .filter(|(p, _)| bvh.nearest(*p).is_some_and(|(d, _)| d <= t2))
            .count();
        Ok(hits as f64 / samples.len() as f64)
    };
    let precision = within(pred, gt, "f_score/pred")?;
    let recall = within(gt, pred, "f_score/gt")?;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        f_score: 100.0 * f,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        degenerate: false,
    })
}
