//! Matrix products and layout changes.

use crate::autodiff::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

fn matrix_dims(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    ensure!(
        shape.len() == 2,
        Error::ShapeMismatch(format!("{op}: expected a matrix, got shape {shape:?}"))
    );
    Ok((shape[0], shape[1]))
}

impl<S: Scalar> Tape<S> {
    /// `a[M, K] * b[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul")?;
        let (k2, n) = matrix_dims(self.shape(b), "matmul")?;
        ensure!(
            k == k2,
            Error::ShapeMismatch(format!("matmul: inner dimensions {k} vs {k2}"))
        );
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            S::zero(),
            MatMut::new(&mut out, m, n),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            "matmul",
            value,
            &[a, b],
            Box::new(move |inp, _, g, needs| {
                let gm = MatRef::new(g, m, n);
                let ga = needs[0].then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    gemm(S::one(), gm, MatRef::new(&inp[1].data, k, n).t(), S::zero(), MatMut::new(&mut ga, m, k));
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    gemm(S::one(), MatRef::new(&inp[0].data, m, k).t(), gm, S::zero(), MatMut::new(&mut gb, k, n));
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x[N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = matrix_dims(self.shape(x), "linear input")?;
        let (fout, fin2) = matrix_dims(self.shape(w), "linear weight")?;
        ensure!(
            fin == fin2,
            Error::ShapeMismatch(format!("linear: input width {fin}, weight expects {fin2}"))
        );
        if let Some(b) = b {
            ensure!(
                self.value(b).len() == fout,
                Error::ShapeMismatch(format!("linear: bias length {} for {fout} outputs", self.value(b).len()))
            );
        }
        let mut out = vec![S::zero(); n * fout];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            S::one(),
            MatRef::new(self.data(x), n, fin),
            MatRef::new(self.data(w), fout, fin).t(),
            S::one(),
            MatMut::new(&mut out, n, fout),
        );
        let value = Tensor::new(&[n, fout], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            "linear",
            value,
            &parents,
            Box::new(move |inp, _, g, needs| {
                let gm = MatRef::new(g, n, fout);
                let gx = needs[0].then(|| {
                    let mut gx = vec![S::zero(); n * fin];
                    gemm(S::one(), gm, MatRef::new(&inp[1].data, fout, fin), S::zero(), MatMut::new(&mut gx, n, fin));
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![S::zero(); fout * fin];
                    gemm(S::one(), gm.t(), MatRef::new(&inp[0].data, n, fin), S::zero(), MatMut::new(&mut gw, fout, fin));
                    gw
                });
                let mut out = vec![gx, gw];
                if needs.len() == 3 {
                    out.push(needs[2].then(|| {
                        let mut gb = vec![S::zero(); fout];
                        for row in g.chunks(fout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        gb
                    }));
                }
                out
            }),
        ))
    }

    /// `[A, B] -> [B, A]`.
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x), "transpose2d")?;
        let value = Tensor::new(&[c, r], transpose(self.data(x), r, c))?;
        Ok(self.push(
            "transpose2d",
            value,
            &[x],
            Box::new(move |_, _, g, _| vec![Some(transpose(g, c, r))]),
        ))
    }
}

pub(crate) fn transpose<S: Copy>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(data[i * cols + j]);
        }
    }
    out
}
