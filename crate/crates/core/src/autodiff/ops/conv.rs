//! Dense 3D convolution (im2col + gemm, chunked over output positions) and
//! non-overlapping transposed convolution. 2D convolutions use depth 1.

use crate::autodiff::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(cin: usize, cout: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            ensure!(
                kernel[a] > 0 && stride[a] > 0 && input[a] + 2 * pad[a] >= kernel[a],
                Error::ShapeMismatch(format!(
                    "conv3d: kernel {kernel:?} stride {stride:?} pad {pad:?} on input {input:?}"
                ))
            );
            output[a] = (input[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1;
        }
        Ok(Conv3dGeom {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn k(&self) -> usize {
        self.cin * self.taps()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.k().max(1)).clamp(1, self.out_len().max(1))
    }

    /// Source offset of every (tap, position) pair in `[l0, l1)`, relative
    /// to a channel plane; `usize::MAX` marks padding.
    fn tap_offsets(&self, l0: usize, l1: usize) -> Vec<usize> {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let n = l1 - l0;
        let mut offs = vec![usize::MAX; self.taps() * n];
        for (j, l) in (l0..l1).enumerate() {
            let (oz, oy, ox) = (l / (oh * ow), (l / ow) % oh, l % ow);
            let bz = (oz * self.stride[0]) as isize - self.pad[0] as isize;
            let by = (oy * self.stride[1]) as isize - self.pad[1] as isize;
            let bx = (ox * self.stride[2]) as isize - self.pad[2] as isize;
            for a in 0..kd {
                let z = bz + a as isize;
                if z < 0 || z >= self.input[0] as isize {
                    continue;
                }
                for b in 0..kh {
                    let y = by + b as isize;
                    if y < 0 || y >= ih as isize {
                        continue;
                    }
                    for c in 0..kw {
                        let x = bx + c as isize;
                        if x < 0 || x >= iw as isize {
                            continue;
                        }
                        let tap = (a * kh + b) * kw + c;
                        offs[tap * n + j] = (z as usize * ih + y as usize) * iw + x as usize;
                    }
                }
            }
        }
        offs
    }
}

fn im2col<S: Scalar>(g: &Conv3dGeom, x: &[S], offs: &[usize], n: usize, cols: &mut [S]) {
    let taps = g.taps();
    let plane = g.in_len();
    for ci in 0..g.cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for tap in 0..taps {
            let row = &mut cols[(ci * taps + tap) * n..(ci * taps + tap + 1) * n];
            for (dst, &o) in row.iter_mut().zip(&offs[tap * n..(tap + 1) * n]) {
                *dst = if o == usize::MAX { S::zero() } else { src[o] };
            }
        }
    }
}

fn col2im<S: Scalar>(g: &Conv3dGeom, cols: &[S], offs: &[usize], n: usize, dx: &mut [S]) {
    let taps = g.taps();
    let plane = g.in_len();
    for ci in 0..g.cin {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for tap in 0..taps {
            let row = &cols[(ci * taps + tap) * n..(ci * taps + tap + 1) * n];
            for (&v, &o) in row.iter().zip(&offs[tap * n..(tap + 1) * n]) {
                if o != usize::MAX {
                    dst[o] += v;
                }
            }
        }
    }
}

fn spatial(shape: &[usize], op: &str) -> Result<(usize, [usize; 3])> {
    ensure!(
        shape.len() == 4,
        Error::ShapeMismatch(format!("{op}: expected [C, D, H, W], got {shape:?}"))
    );
    Ok((shape[0], [shape[1], shape[2], shape[3]]))
}

impl<S: Scalar> Tape<S> {
    /// `x[Cin, D, H, W]`, `w[Cout, Cin, kd, kh, kw]`, optional `b[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (cin, input) = spatial(self.shape(x), "conv3d")?;
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 5 && ws[1] == cin,
            Error::ShapeMismatch(format!("conv3d: weight {ws:?} for {cin} input channels"))
        );
        let cout = ws[0];
        if let Some(b) = b {
            ensure!(
                self.value(b).len() == cout,
                Error::ShapeMismatch("conv3d: bias length".into())
            );
        }
        let g = Conv3dGeom::new(cin, cout, input, [ws[2], ws[3], ws[4]], stride, pad)?;
        let (k, l) = (g.k(), g.out_len());
        let mut out = vec![S::zero(); cout * l];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(l).zip(self.data(b)) {
                row.fill(bv);
            }
        }
        let chunk = g.chunk();
        let mut cols = vec![S::zero(); k * chunk];
        let (xd, wd) = (self.data(x), self.data(w));
        for l0 in (0..l).step_by(chunk) {
            let l1 = (l0 + chunk).min(l);
            let n = l1 - l0;
            let offs = g.tap_offsets(l0, l1);
            im2col(&g, xd, &offs, n, &mut cols[..k * n]);
            gemm(
                S::one(),
                MatRef::new(wd, cout, k),
                MatRef::new(&cols[..k * n], k, n),
                S::one(),
                MatMut::strided(&mut out[l0..], cout, n, l, 1),
            );
        }
        let value = Tensor::new(&[cout, g.output[0], g.output[1], g.output[2]], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            "conv3d",
            value,
            &parents,
            Box::new(move |inp, _, dy, needs| {
                let (xd, wd) = (&inp[0].data, &inp[1].data);
                let mut dx = needs[0].then(|| vec![S::zero(); cin * g.in_len()]);
                let mut dw = needs[1].then(|| vec![S::zero(); cout * k]);
                let mut cols = vec![S::zero(); k * chunk];
                for l0 in (0..l).step_by(chunk) {
                    let l1 = (l0 + chunk).min(l);
                    let n = l1 - l0;
                    let offs = g.tap_offsets(l0, l1);
                    let dyc = MatRef {
                        data: &dy[l0..],
                        rows: cout,
                        cols: n,
                        rs: l,
                        cs: 1,
                    };
                    if let Some(dw) = &mut dw {
                        im2col(&g, xd, &offs, n, &mut cols[..k * n]);
                        gemm(
                            S::one(),
                            dyc,
                            MatRef::new(&cols[..k * n], k, n).t(),
                            S::one(),
                            MatMut::new(dw, cout, k),
                        );
                    }
                    if let Some(dx) = &mut dx {
                        gemm(
                            S::one(),
                            MatRef::new(wd, cout, k).t(),
                            dyc,
                            S::zero(),
                            MatMut::new(&mut cols[..k * n], k, n),
                        );
                        col2im(&g, &cols[..k * n], &offs, n, dx);
                    }
                }
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| dy.chunks(l).map(|r| r.iter().copied().sum()).collect()));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution whose kernel equals its stride, so output
    /// cells receive exactly one tap: `x[Cin, D, H, W]`,
    /// `w[Cin, Cout, kd, kh, kw]` -> `[Cout, D*kd, H*kh, W*kw]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, [d, h, wi]) = spatial(self.shape(x), "conv_transpose3d")?;
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 5 && ws[0] == cin,
            Error::ShapeMismatch(format!("conv_transpose3d: weight {ws:?} for {cin} input channels"))
        );
        let (cout, kd, kh, kw) = (ws[1], ws[2], ws[3], ws[4]);
        let kk = kd * kh * kw;
        let l = d * h * wi;
        let (od, oh, ow) = (d * kd, h * kh, wi * kw);
        let ol = od * oh * ow;
        if let Some(b) = b {
            ensure!(
                self.value(b).len() == cout,
                Error::ShapeMismatch("conv_transpose3d: bias length".into())
            );
        }
        // tmp[(co, tap), l] = sum_ci w[ci, (co, tap)] x[ci, l]
        let mut tmp = vec![S::zero(); cout * kk * l];
        gemm(
            S::one(),
            MatRef::new(self.data(w), cin, cout * kk).t(),
            MatRef::new(self.data(x), cin, l),
            S::zero(),
            MatMut::new(&mut tmp, cout * kk, l),
        );
        // Output offset of each (tap, l).
        let mut dst = vec![0usize; kk * l];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wi {
                    let li = (z * h + y) * wi + xx;
                    for a in 0..kd {
                        for bb in 0..kh {
                            for c in 0..kw {
                                let tap = (a * kh + bb) * kw + c;
                                dst[tap * l + li] = ((z * kd + a) * oh + y * kh + bb) * ow + xx * kw + c;
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![S::zero(); cout * ol];
        let bias: Option<Vec<S>> = b.map(|b| self.data(b).to_vec());
        for co in 0..cout {
            let bv = bias.as_ref().map_or(S::zero(), |b| b[co]);
            for tap in 0..kk {
                let row = &tmp[(co * kk + tap) * l..(co * kk + tap + 1) * l];
                for (li, &v) in row.iter().enumerate() {
                    out[co * ol + dst[tap * l + li]] = v + bv;
                }
            }
        }
        let value = Tensor::new(&[cout, od, oh, ow], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            "conv_transpose3d",
            value,
            &parents,
            Box::new(move |inp, _, dy, needs| {
                let mut dtmp = vec![S::zero(); cout * kk * l];
                for co in 0..cout {
                    for tap in 0..kk {
                        for li in 0..l {
                            dtmp[(co * kk + tap) * l + li] = dy[co * ol + dst[tap * l + li]];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); cin * l];
                    gemm(
                        S::one(),
                        MatRef::new(&inp[1].data, cin, cout * kk),
                        MatRef::new(&dtmp, cout * kk, l),
                        S::zero(),
                        MatMut::new(&mut dx, cin, l),
                    );
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); cin * cout * kk];
                    gemm(
                        S::one(),
                        MatRef::new(&inp[0].data, cin, l),
                        MatRef::new(&dtmp, cout * kk, l).t(),
                        S::zero(),
                        MatMut::new(&mut dw, cin, cout * kk),
                    );
                    dw
                });
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| dy.chunks(ol).map(|r| r.iter().copied().sum()).collect()));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-sum reference convolution.
    fn naive(x: &[f64], cin: usize, inp: [usize; 3], w: &[f64], cout: usize, k: [usize; 3], s: [usize; 3], p: [usize; 3]) -> Vec<f64> {
        let g = Conv3dGeom::new(cin, cout, inp, k, s, p).unwrap();
        let [od, oh, ow] = g.output;
        let mut out = vec![0.0; cout * od * oh * ow];
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for a in 0..k[0] {
                                for b in 0..k[1] {
                                    for c in 0..k[2] {
                                        let z = (oz * s[0] + a) as isize - p[0] as isize;
                                        let y = (oy * s[1] + b) as isize - p[1] as isize;
                                        let xx = (ox * s[2] + c) as isize - p[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 || z >= inp[0] as isize || y >= inp[1] as isize || xx >= inp[2] as isize {
                                            continue;
                                        }
                                        let xi = ((ci * inp[0] + z as usize) * inp[1] + y as usize) * inp[2] + xx as usize;
                                        let wi = (((co * cin + ci) * k[0] + a) * k[1] + b) * k[2] + c;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = crate::rng::from_seed(5);
        use rand::Rng as _;
        for (inp, k, s, p) in [
            ([4, 5, 6], [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([4, 6, 6], [3, 3, 3], [2, 2, 2], [1, 1, 1]),
            ([1, 8, 8], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            ([3, 3, 3], [1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ] {
            let (cin, cout) = (3, 2);
            let x: Vec<f64> = (0..cin * inp.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..cout * cin * k.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut t = Tape::<f64>::new();
            let xv = t.constant(Tensor::new(&[cin, inp[0], inp[1], inp[2]], x.clone()).unwrap());
            let wv = t.constant(Tensor::new(&[cout, cin, k[0], k[1], k[2]], w.clone()).unwrap());
            let y = t.conv3d(xv, wv, None, s, p).unwrap();
            let want = naive(&x, cin, inp, &w, cout, k, s, p);
            for (a, b) in t.data(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_keeps_size_and_stride_two_halves() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(&[2, 8, 8, 8]));
        let w = t.constant(Tensor::zeros(&[4, 2, 3, 3, 3]));
        let y = t.conv3d(x, w, None, [1; 3], [1; 3]).unwrap();
        assert_eq!(t.shape(y), &[4, 8, 8, 8]);
        let y = t.conv3d(x, w, None, [2; 3], [1; 3]).unwrap();
        assert_eq!(t.shape(y), &[4, 4, 4, 4]);
    }

    #[test]
    fn transposed_places_each_tap() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 10.0]).unwrap());
        let w = t.constant(Tensor::new(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let y = t.conv_transpose3d(x, w, None).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2, 4]);
        let d = t.data(y);
        // out[z, y, 2*xi + c] = x[xi] * w[z, y, c]
        assert_eq!(&d[0..4], &[0.0, 1.0, 0.0, 10.0]);
        assert_eq!(&d[12..16], &[6.0, 7.0, 60.0, 70.0]);
    }
}
