use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::volume::mesh::EXTENT_HALF;
use crate::volume::ColoredPointCloud;

use super::pose::CameraPose;
use super::raster::RenderedView;

/// Lifts every foreground pixel to 3D through its depth and pose, keeping
/// its color. Points outside the unit cube are dropped. All-background input
/// yields an empty cloud.
pub fn unproject_views(views: &[RenderedView], poses: &[CameraPose]) -> Result<ColoredPointCloud> {
    ensure!(
        views.len() == poses.len(),
        Error::ShapeMismatch(format!("{} views for {} poses", views.len(), poses.len()))
    );
    let mut cloud = ColoredPointCloud::default();
    for (view, pose) in views.iter().zip(poses) {
        let n = view.resolution();
        ensure!(
            n == pose.resolution,
            Error::ShapeMismatch(format!("view is {n}px, pose expects {}px", pose.resolution))
        );
        let frame = pose.frame();
        for i in 0..n * n {
            if !view.mask[i] {
                continue;
            }
            let (px, py) = (i % n, i / n);
            let p = pose.unproject_in(&frame, px as f64 + 0.5, py as f64 + 0.5, view.depth[i] as f64);
            if p.abs().max_element() <= EXTENT_HALF {
                cloud.push(p, view.rgb.pixel(px, py));
            }
        }
    }
    Ok(cloud)
}

/// Simulates imperfect generated views. Per view: a global color shift of
/// at most `0.1 * level` per channel, Gaussian pixel noise with
/// `sigma = 0.05 * level` on the foreground, and for `level >= 0.5` a
/// one-pixel mask erosion or dilation. Level 0 returns the input unchanged.
pub fn degrade_views(views: &[RenderedView], level: f64, seed: u64) -> Result<Vec<RenderedView>> {
    ensure!(
        (0.0..=1.0).contains(&level),
        Error::InvalidArgument(format!("degradation level {level} outside [0, 1]"))
    );
    if level == 0.0 {
        return Ok(views.to_vec());
    }
    let noise = Normal::new(0.0, 0.05 * level).expect("finite sigma");
    views
        .iter()
        .enumerate()
        .map(|(k, view)| {
            let mut rng = crate::rng::stream(seed, &format!("degrade/{k}"));
            let mut out = view.clone();
            if level >= 0.5 {
                let dilate = rng.random::<bool>();
                morph_mask(&mut out, dilate);
            }
            let shift: [f32; 3] = [0, 1, 2].map(|_| (rng.random_range(-1.0..=1.0) * 0.1 * level) as f32);
            for i in 0..out.mask.len() {
                if !out.mask[i] {
                    continue;
                }
                for c in 0..3 {
                    let e: f64 = noise.sample(&mut rng);
                    let v = &mut out.rgb.data[i * 3 + c];
                    *v = (*v + shift[c] + e as f32).clamp(0.0, 1.0);
                }
            }
            Ok(out)
        })
        .collect()
}

/// One-pixel 4-neighborhood erosion or dilation of the foreground. Dilated
/// pixels copy color and depth from their first foreground neighbor
/// (left, right, up, down).
fn morph_mask(view: &mut RenderedView, dilate: bool) {
    let n = view.resolution();
    let src = view.clone();
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let neighbors = [
                (x > 0).then(|| i - 1),
                (x + 1 < n).then(|| i + 1),
                (y > 0).then(|| i - n),
                (y + 1 < n).then(|| i + n),
            ];
            if dilate && !src.mask[i] {
                if let Some(j) = neighbors.into_iter().flatten().find(|&j| src.mask[j]) {
                    view.depth[i] = src.depth[j];
                    let c = src.rgb.pixel(j % n, j / n);
                    view.rgb.set_pixel(x, y, c);
                }
            } else if !dilate && src.mask[i] && neighbors.into_iter().flatten().any(|j| !src.mask[j]) {
                view.depth[i] = f32::INFINITY;
            }
        }
    }
    view.sync_mask();
}

/// Mean of a non-empty set of points.
pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::ZERO, |a, &p| a + p) / points.len().max(1) as f64
}
