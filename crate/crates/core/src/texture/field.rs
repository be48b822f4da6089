use crate::autodiff::Stencils;
use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::volume::TriMesh;

/// Diffuse RGB plus RGB coefficients for each of the three first-order
/// basis functions.
pub const FIELD_CHANNELS: usize = 12;
/// Basis functions per color channel, the constant one included.
pub const BASIS: usize = 4;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const INIT_GRAY: f32 = 0.5;

/// `[1, c*d.y, c*d.z, c*d.x]`: the constant term followed by the real
/// degree-1 spherical harmonics. `d` points from the surface toward the
/// viewer; a zero vector selects the diffuse color alone.
pub fn sh_basis(d: Vec3) -> [f64; BASIS] {
    [1.0, SH_C1 * d.y, SH_C1 * d.z, SH_C1 * d.x]
}

/// Dense color grid over an axis-aligned box, queried by trilinear
/// interpolation. Cell centers sit at `lo + (i + 0.5) * cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorField {
    pub resolution: usize,
    pub lo: Vec3,
    pub cell: Vec3,
    /// Channel-planar `[12, R, R, R]`, x fastest. Channel `3 * b + c` is
    /// color `c` of basis function `b`.
    pub data: Vec<f32>,
}

impl ColorField {
    /// Gray diffuse color, no view dependence.
    pub fn new(resolution: usize, lo: Vec3, hi: Vec3) -> Result<Self> {
        ensure!(
            resolution >= 2,
            Error::InvalidArgument(format!("color field resolution {resolution} is below 2"))
        );
        let size = hi - lo;
        ensure!(
            size.x > 0.0 && size.y > 0.0 && size.z > 0.0 && size.norm().is_finite(),
            Error::InvalidArgument("color field box is empty".into())
        );
        let n = resolution.pow(3);
        let mut data = vec![0.0; FIELD_CHANNELS * n];
        data[..3 * n].fill(INIT_GRAY);
        Ok(ColorField {
            resolution,
            lo,
            cell: size / resolution as f64,
            data,
        })
    }

    /// Field over the mesh bounding box grown by `margin` times its largest
    /// side on every face.
    pub fn covering(mesh: &TriMesh, resolution: usize, margin: f64) -> Result<Self> {
        let (lo, hi) = mesh
            .bounds()
            .ok_or_else(|| Error::Degenerate("color field over an empty mesh".into()))?;
        let size = hi - lo;
        let pad = size.x.max(size.y).max(size.z).max(1e-6) * margin.max(0.0) + 1e-9;
        let pad = Vec3::new(pad, pad, pad);
        ColorField::new(resolution, lo - pad, hi + pad)
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn hi(&self) -> Vec3 {
        self.lo + self.cell * self.resolution as f64
    }

    /// Trilinear stencil of `p` over the cells, clamped to the grid.
    pub fn stencil(&self, p: Vec3) -> [(u32, f64); 8] {
        let top = (self.resolution - 1) as f64;
        let g = |v: f64, lo: f64, cell: f64| ((v - lo) / cell - 0.5).clamp(0.0, top);
        let coords = [
            g(p.x, self.lo.x, self.cell.x),
            g(p.y, self.lo.y, self.cell.y),
            g(p.z, self.lo.z, self.cell.z),
        ];
        let r = self.resolution;
        Stencils::trilinear([r, r, r], &[Some(coords)]).taps[0]
    }

    /// Unclamped color at `p` seen from direction `d` (surface to viewer).
    pub fn query(&self, p: Vec3, d: Vec3) -> [f32; 3] {
        let n = self.num_cells();
        let basis = sh_basis(d);
        let mut out = [0.0f64; 3];
        for (cell, w) in self.stencil(p) {
            if w == 0.0 {
                continue;
            }
            for (b, &y) in basis.iter().enumerate() {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * y * self.data[(3 * b + c) * n + cell as usize] as f64;
                }
            }
        }
        out.map(|v| v as f32)
    }

    /// True when any first-order coefficient is nonzero.
    pub fn has_view_dependence(&self) -> bool {
        self.data[3 * self.num_cells()..].iter().any(|&v| v != 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mesh::box_mesh;

    #[test]
    fn covering_box_has_margin() {
        let mesh = box_mesh(Vec3::new(-0.2, -0.1, 0.0), Vec3::new(0.2, 0.3, 0.1));
        let f = ColorField::covering(&mesh, 16, 0.05).unwrap();
        assert!((f.lo.x - (-0.22)).abs() < 1e-6 && (f.hi().y - 0.32).abs() < 1e-6);
        assert!((f.lo.z - (-0.02)).abs() < 1e-6);
    }

    #[test]
    fn fresh_field_is_gray_and_view_independent() {
        let f = ColorField::new(8, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert!(!f.has_view_dependence());
        for d in [Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.6, -0.8, 0.0)] {
            assert_eq!(f.query(Vec3::new(0.1, -0.3, 0.7), d), [0.5; 3]);
        }
    }

    #[test]
    fn query_interpolates_linear_data() {
        // Diffuse red = x coordinate of the cell center, first basis green = 1.
        let mut f = ColorField::new(4, Vec3::ZERO, Vec3::new(4.0, 4.0, 4.0)).unwrap();
        let n = f.num_cells();
        for i in 0..n {
            f.data[i] = (i % 4) as f32 + 0.5;
        }
        f.data[3 * n + n..3 * n + 2 * n].fill(1.0);
        let c = f.query(Vec3::new(1.3, 2.2, 0.9), Vec3::new(0.0, 1.0, 0.0));
        assert!((c[0] - 1.3).abs() < 1e-6);
        assert!((c[1] - (0.5 + SH_C1 as f32)).abs() < 1e-6);
        // Outside the grid the query clamps to the border cells.
        assert!((f.query(Vec3::new(-3.0, 1.0, 1.0), Vec3::ZERO)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(ColorField::new(8, Vec3::ZERO, Vec3::new(1.0, 0.0, 1.0)).is_err());
        assert!(ColorField::new(1, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)).is_err());
        assert!(ColorField::covering(&TriMesh::new(vec![], vec![]), 8, 0.05).is_err());
    }
}
