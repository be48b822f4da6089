//! Trilinear sampling as a weighted gather with precomputed stencils.

use std::sync::Arc;

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

use super::elementwise::Layout;

/// Up to eight `(source position, weight)` taps per output point. Unused taps
/// carry weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencils {
    pub n_src: usize,
    pub taps: Vec<[(u32, f64); 8]>,
}

impl Stencils {
    /// Trilinear stencils on a `[d, h, w]` grid (x fastest). Coordinates are
    /// `(x, y, z)` in cell units with centers at integers; corners outside
    /// the grid contribute zero. `None` points get an all-zero stencil.
    pub fn trilinear(dims: [usize; 3], points: &[Option<[f64; 3]>]) -> Stencils {
        let [d, h, w] = dims;
        let taps = points
            .iter()
            .map(|p| {
                let mut out = [(0u32, 0.0); 8];
                let Some([x, y, z]) = *p else { return out };
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return out;
                }
                let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
                let (fx, fy, fz) = (x - x0, y - y0, z - z0);
                for (k, slot) in out.iter_mut().enumerate() {
                    let (a, b, c) = ((k >> 2) & 1, (k >> 1) & 1, k & 1);
                    let (zi, yi, xi) = (z0 as i64 + a as i64, y0 as i64 + b as i64, x0 as i64 + c as i64);
                    let wz = if a == 1 { fz } else { 1.0 - fz };
                    let wy = if b == 1 { fy } else { 1.0 - fy };
                    let wx = if c == 1 { fx } else { 1.0 - fx };
                    let wgt = wz * wy * wx;
                    if wgt == 0.0
                        || zi < 0
                        || yi < 0
                        || xi < 0
                        || zi >= d as i64
                        || yi >= h as i64
                        || xi >= w as i64
                    {
                        continue;
                    }
                    *slot = ((((zi as usize) * h + yi as usize) * w + xi as usize) as u32, wgt);
                }
                out
            })
            .collect();
        Stencils {
            n_src: d * h * w,
            taps,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

impl<S: Scalar> Tape<S> {
    /// `out[p, c] = sum_k w_k * x[c, src_k]`, output `[P, C]`. The source
    /// positions index the non-channel part of `x` in `layout`.
    pub fn interpolate(&mut self, x: Var, stencils: Arc<Stencils>, layout: Layout) -> Result<Var> {
        let (c, n) = layout.split(self.shape(x))?;
        ensure!(
            n == stencils.n_src,
            Error::ShapeMismatch(format!("interpolate: {n} source positions, stencils expect {}", stencils.n_src))
        );
        let xd = self.data(x);
        let p = stencils.len();
        let mut out = vec![S::zero(); p * c];
        for (i, st) in stencils.taps.iter().enumerate() {
            let row = &mut out[i * c..(i + 1) * c];
            for &(src, wgt) in st {
                if wgt == 0.0 {
                    continue;
                }
                let wgt = S::from_f64_lossy(wgt);
                for (ch, r) in row.iter_mut().enumerate() {
                    *r += wgt * xd[layout.at(ch, src as usize, c, n)];
                }
            }
        }
        let value = Tensor::new(&[p, c], out)?;
        Ok(self.push(
            "interpolate",
            value,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![S::zero(); c * n];
                for (i, st) in stencils.taps.iter().enumerate() {
                    let row = &g[i * c..(i + 1) * c];
                    for &(src, wgt) in st {
                        if wgt == 0.0 {
                            continue;
                        }
                        let wgt = S::from_f64_lossy(wgt);
                        for (ch, &gv) in row.iter().enumerate() {
                            gx[layout.at(ch, src as usize, c, n)] += wgt * gv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Trilinear sampling of `x[C, D, H, W]` at grid coordinates `(x, y, z)`
    /// with zero padding; returns `[P, C]`.
    pub fn grid_sample(&mut self, x: Var, points: &[Option<[f64; 3]>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 4,
            Error::ShapeMismatch(format!("grid_sample: expected [C, D, H, W], got {s:?}"))
        );
        let st = Stencils::trilinear([s[1], s[2], s[3]], points);
        self.interpolate(x, Arc::new(st), Layout::ChannelFirst)
    }
}
