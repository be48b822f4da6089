//! Z-buffered perspective rasterization with barycentric vertex colors.

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;
use crate::volume::TriMesh;

use super::image::{RgbImage, BACKGROUND};
use super::pose::{CameraPose, NEAR};

/// A rendered condition or supervision view. Background pixels have
/// infinite depth, a clear mask and the fixed white background color.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RenderedView {
    pub fn background(resolution: usize) -> Self {
        RenderedView {
            rgb: RgbImage::filled(resolution, resolution, BACKGROUND),
            depth: vec![f32::INFINITY; resolution * resolution],
            mask: vec![false; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.rgb.width
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Re-derives the mask from depth and repaints the background.
    pub fn sync_mask(&mut self) {
        for (i, d) in self.depth.iter().enumerate() {
            self.mask[i] = d.is_finite();
            if !self.mask[i] {
                self.rgb.data[i * 3..i * 3 + 3].copy_from_slice(&BACKGROUND);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shading {
    /// Interpolated vertex albedo, no lighting.
    Unlit,
    /// Constant gray; vertex colors are not needed.
    Flat,
}

const FLAT_GRAY: [f32; 3] = [0.5, 0.5, 0.5];

/// Per-pixel result of a render: the covering triangle and its
/// perspective-correct barycentric weights.
#[derive(Clone, Debug)]
pub struct Fragments {
    pub triangle: Vec<u32>,
    pub bary: Vec<[f32; 3]>,
}

/// Renders `mesh` from `pose`. Depth ties resolve to the lower triangle
/// index, so the output does not depend on submission order.
pub fn rasterize(mesh: &TriMesh, pose: &CameraPose, shading: Shading) -> Result<RenderedView> {
    Ok(rasterize_with_fragments(mesh, pose, shading)?.0)
}

pub fn rasterize_with_fragments(
    mesh: &TriMesh,
    pose: &CameraPose,
    shading: Shading,
) -> Result<(RenderedView, Fragments)> {
    mesh.validate()?;
    ensure!(
        shading != Shading::Unlit || mesh.colors.is_some() || mesh.is_empty(),
        Error::InvalidArgument("unlit rendering needs vertex colors".into())
    );
    let n = pose.resolution;
    let mut view = RenderedView::background(n);
    let mut tri_buf = vec![u32::MAX; n * n];
    let mut bary_buf = vec![[0.0f32; 3]; n * n];
    let mut zbuf = vec![f64::INFINITY; n * n];
    let frame = pose.frame();
    let projected: Vec<Option<(f64, f64, f64)>> = mesh
        .vertices
        .iter()
        .map(|&v| pose.project_in(&frame, v).map(|p| (p.u, p.v, p.depth)))
        .collect();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let mut s = [(0.0, 0.0, 0.0); 3];
        let mut visible = true;
        for (k, &i) in tri.iter().enumerate() {
            match projected[i as usize] {
                Some(p) if p.2 > NEAR => s[k] = p,
                _ => visible = false,
            }
        }
        if !visible {
            continue;
        }
        let area = edge(s[0], s[1], s[2].0, s[2].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as usize;
        let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(n as f64) as usize;
        for py in min_y..max_y {
            for px in min_x..max_x {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = edge(s[1], s[2], x, y) / area;
                let w1 = edge(s[2], s[0], x, y) / area;
                let w2 = edge(s[0], s[1], x, y) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 / s[0].2 + w1 / s[1].2 + w2 / s[2].2;
                let z = 1.0 / inv_z;
                let i = py * n + px;
                let closer = z < zbuf[i] || (z == zbuf[i] && (t as u32) < tri_buf[i]);
                if !closer {
                    continue;
                }
                zbuf[i] = z;
                tri_buf[i] = t as u32;
                bary_buf[i] = [
                    (w0 / s[0].2 * z) as f32,
                    (w1 / s[1].2 * z) as f32,
                    (w2 / s[2].2 * z) as f32,
                ];
            }
        }
    }
    for i in 0..n * n {
        if tri_buf[i] == u32::MAX {
            continue;
        }
        view.depth[i] = zbuf[i] as f32;
        view.mask[i] = true;
        let c = match (shading, &mesh.colors) {
            (Shading::Unlit, Some(colors)) => {
                let tri = mesh.triangles[tri_buf[i] as usize];
                let b = bary_buf[i];
                let mut c = [0.0f32; 3];
                for k in 0..3 {
                    let vc = colors[tri[k] as usize];
                    for ch in 0..3 {
                        c[ch] += b[k] * vc[ch];
                    }
                }
                c.map(|v| v.clamp(0.0, 1.0))
            }
            _ => FLAT_GRAY,
        };
        view.rgb.data[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    Ok((
        view,
        Fragments {
            triangle: tri_buf,
            bary: bary_buf,
        },
    ))
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}

/// World-space surface point seen at pixel `i` of a render.
pub fn pixel_point(pose: &CameraPose, view: &RenderedView, i: usize) -> Option<Vec3> {
    let d = view.depth[i];
    if !d.is_finite() {
        return None;
    }
    let n = view.resolution();
    let (px, py) = (i % n, i / n);
    Some(pose.unproject(px as f64 + 0.5, py as f64 + 0.5, d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mesh::uv_sphere;

    fn pose(res: usize) -> CameraPose {
        CameraPose::new(0.0, 0.0, 1.5, 45.0, res).unwrap()
    }

    /// Triangle in the plane x = `x`, facing the camera on +x, large
    /// enough to cover the whole view.
    fn wall(x: f64, color: [f32; 3]) -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(x, -10.0, -10.0), Vec3::new(x, 10.0, -10.0), Vec3::new(x, 0.0, 20.0)],
            vec![[0, 1, 2]],
        )
        .with_colors(vec![color; 3])
    }

    #[test]
    fn full_screen_triangle_is_uniform() {
        let v = rasterize(&wall(0.0, [1.0, 0.0, 0.0]), &pose(32), Shading::Unlit).unwrap();
        assert!(v.mask.iter().all(|&m| m));
        for i in 0..32 * 32 {
            let c = v.rgb.pixel(i % 32, i / 32);
            assert!((c[0] - 1.0).abs() < 1e-6 && c[1] == 0.0 && c[2] == 0.0, "{c:?}");
        }
        // The plane x = 0 lies at depth 1.5 along the optical axis.
        for &d in &v.depth {
            assert!((d - 1.5).abs() < 1e-5, "{d}");
        }
    }

    #[test]
    fn nearer_triangle_wins_in_any_order() {
        let near = wall(0.2, [0.0, 1.0, 0.0]);
        let far = wall(-0.2, [0.0, 0.0, 1.0]);
        let mut a = far.clone();
        a.vertices.extend(near.vertices.iter());
        a.triangles.push([3, 4, 5]);
        a.colors.as_mut().unwrap().extend(near.colors.unwrap());
        let mut b = a.clone();
        b.triangles.reverse();
        let va = rasterize(&a, &pose(16), Shading::Unlit).unwrap();
        let vb = rasterize(&b, &pose(16), Shading::Unlit).unwrap();
        assert_eq!(va.depth, vb.depth);
        assert_eq!(va.rgb, vb.rgb);
        assert_eq!(va.rgb.pixel(8, 8), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let v = rasterize(&TriMesh::default(), &pose(8), Shading::Unlit).unwrap();
        assert_eq!(v, RenderedView::background(8));
    }

    #[test]
    fn sphere_silhouette_matches_projected_disk() {
        let (rho, d) = (0.3, 1.5);
        let p = pose(256);
        let mesh = uv_sphere(Vec3::ZERO, rho, 96, 192);
        let v = rasterize(&mesh, &p, Shading::Flat).unwrap();
        let covered = v.foreground_count() as f64;
        // Silhouette cone half-angle asin(rho/d); its image is a disk.
        let alpha = (rho / d).asin();
        let radius_px = p.focal() * alpha.tan();
        let want = std::f64::consts::PI * radius_px * radius_px;
        assert!((covered - want).abs() / want < 0.02, "{covered} vs {want}");
    }

    #[test]
    fn unlit_without_colors_is_rejected() {
        let mut m = wall(0.0, [1.0; 3]);
        m.colors = None;
        assert!(rasterize(&m, &pose(8), Shading::Unlit).is_err());
        assert!(rasterize(&m, &pose(8), Shading::Flat).is_ok());
    }
}
