//! Axis reductions and concatenation.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// `(outer, len, inner)` around `axis`.
fn around(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    ensure!(
        axis < shape.len(),
        Error::ShapeMismatch(format!("axis {axis} out of range for shape {shape:?}"))
    );
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn without(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<S: Scalar> Tape<S> {
    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = around(&shape, axis)?;
        ensure!(len > 0, Error::ShapeMismatch("max over an empty axis".into()));
        let data = self.data(x);
        let mut out = vec![S::zero(); outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let (mut best, mut bk) = (data[base], 0);
                for k in 1..len {
                    let v = data[base + k * inner];
                    if v > best {
                        best = v;
                        bk = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bk as u32;
            }
        }
        let value = Tensor::new(&without(&shape, axis), out)?;
        Ok(self.push(
            "max_axis",
            value,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i] as usize;
                        gx[o * len * inner + k * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = around(&shape, axis)?;
        let data = self.data(x);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (a, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let value = Tensor::new(&without(&shape, axis), out)?;
        Ok(self.push(
            "sum_axis",
            value,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::ShapeMismatch(format!("axis {axis} out of range")))?;
        ensure!(len > 0, Error::ShapeMismatch("mean over an empty axis".into()));
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), Error::InvalidArgument("concat of nothing".into()));
        let first = self.shape(xs[0]).to_vec();
        let (outer, _, inner) = around(&first, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            ensure!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b),
                Error::ShapeMismatch(format!("concat: {s:?} vs {first:?} on axis {axis}"))
            );
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.data(x)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            "concat",
            value,
            xs,
            Box::new(move |_, _, g, needs| {
                let mut grads: Vec<Option<Vec<S>>> = lens
                    .iter()
                    .zip(needs)
                    .map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gr, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gr) = gr {
                            gr.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }),
        ))
    }
}
