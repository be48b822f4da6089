use crate::error::{ensure, Error, Result};

/// Background color of every render.
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

/// Row-major RGB image with interleaved `f32` channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, c: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&c);
        }
        RgbImage { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == width * height * 3,
            Error::ShapeMismatch(format!("{}x{} RGB image needs {} values", width, height, width * height * 3))
        );
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// half-integers), clamping to the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f32; 3] {
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        [0, 1, 2].map(|k| {
            (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
        })
    }

    /// Snap every channel to the nearest multiple of 1/255.
    pub fn quantize(&mut self) {
        for c in &mut self.data {
            *c = quantize_u8(*c) as f32 / 255.0;
        }
    }
}

pub fn quantize_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Three rows of two views: row `r` holds views `2r` and `2r + 1`.
pub fn tile_views(views: &[RgbImage]) -> Result<RgbImage> {
    ensure!(
        views.len() == 6,
        Error::InvalidArgument(format!("tiling needs 6 views, got {}", views.len()))
    );
    let (w, h) = (views[0].width, views[0].height);
    ensure!(
        views.iter().all(|v| v.width == w && v.height == h),
        Error::ShapeMismatch("all views must share one resolution".into())
    );
    let mut out = RgbImage::filled(2 * w, 3 * h, [0.0; 3]);
    for (k, view) in views.iter().enumerate() {
        let (row, col) = (k / 2, k % 2);
        for y in 0..h {
            let dst = ((row * h + y) * 2 * w + col * w) * 3;
            out.data[dst..dst + 3 * w].copy_from_slice(&view.data[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(out)
}

pub fn untile_views(image: &RgbImage) -> Result<Vec<RgbImage>> {
    ensure!(
        image.width % 2 == 0 && image.height % 3 == 0 && image.width > 0,
        Error::ShapeMismatch(format!("{}x{} is not a 2x3 tiling", image.width, image.height))
    );
    let (w, h) = (image.width / 2, image.height / 3);
    Ok((0..6)
        .map(|k| {
            let (row, col) = (k / 2, k % 2);
            let mut data = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                let src = ((row * h + y) * image.width + col * w) * 3;
                data.extend_from_slice(&image.data[src..src + 3 * w]);
            }
            RgbImage { width: w, height: h, data }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(k: usize, w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| ((i * 7 + k * 13) % 256) as f32 / 255.0).collect();
        RgbImage::from_data(w, h, data).unwrap()
    }

    #[test]
    fn tiled_layout() {
        let views: Vec<RgbImage> = (0..6).map(|k| view(k, 4, 3)).collect();
        let t = tile_views(&views).unwrap();
        assert_eq!((t.width, t.height), (8, 9));
        // View 3 covers rows [h, 2h) and cols [w, 2w).
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(t.pixel(4 + x, 3 + y), views[3].pixel(x, y));
            }
        }
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mut views: Vec<RgbImage> = (0..6).map(|k| view(k, 4, 3)).collect();
        views[5] = view(5, 4, 4);
        assert!(tile_views(&views).is_err());
        assert!(tile_views(&views[..5]).is_err());
    }

    proptest! {
        #[test]
        fn untile_inverts_tile(w in 1usize..9, h in 1usize..9, seed in 0usize..100) {
            let views: Vec<RgbImage> = (0..6).map(|k| view(k + seed, w, h)).collect();
            prop_assert_eq!(untile_views(&tile_views(&views).unwrap()).unwrap(), views);
        }
    }
}
