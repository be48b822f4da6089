//! Sparse 3D convolution driven by a rulebook of (input row, output row)
//! pairs per kernel tap. Submanifold, stride-2 downsampling and stride-2
//! upsampling all reduce to this one operator.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::volume::grid::{check_sorted_unique, Voxel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// `pairs[tap]` lists `(input row, output row)`.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn taps(&self) -> usize {
        self.pairs.len()
    }

    /// 3x3x3 submanifold convolution: output rows are the input rows.
    /// Tap order is `(dz, dy, dx)` row-major over `-1..=1`, matching a dense
    /// `[Cout, Cin, 3, 3, 3]` kernel.
    pub fn submanifold(indices: &[Voxel]) -> Result<Rulebook> {
        check_sorted_unique(indices)?;
        let lookup: HashMap<Voxel, u32> = indices.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let mut pairs = vec![Vec::new(); 27];
        for (o, v) in indices.iter().enumerate() {
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                        if n.iter().any(|&c| c < 0 || c > u32::MAX as i64) {
                            continue;
                        }
                        let key = [n[0] as u32, n[1] as u32, n[2] as u32];
                        if let Some(&i) = lookup.get(&key) {
                            let tap = ((dz + 1) * 9 + (dy + 1) * 3 + dx + 1) as usize;
                            pairs[tap].push((i, o as u32));
                        }
                    }
                }
            }
        }
        Ok(Rulebook {
            n_in: indices.len(),
            n_out: indices.len(),
            pairs,
        })
    }

    /// Kernel-2, stride-2 downsampling onto the parent set. Tap order is
    /// the child parity `(pz, py, px)` row-major.
    pub fn downsample(indices: &[Voxel]) -> Result<(Vec<Voxel>, Rulebook)> {
        check_sorted_unique(indices)?;
        let mut parents: Vec<Voxel> = indices.iter().map(|v| v.map(|c| c / 2)).collect();
        parents.sort_unstable();
        parents.dedup();
        let lookup: HashMap<Voxel, u32> = parents.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let mut pairs = vec![Vec::new(); 8];
        for (i, v) in indices.iter().enumerate() {
            let o = lookup[&v.map(|c| c / 2)];
            pairs[parity(*v)].push((i as u32, o));
        }
        Ok((
            parents.clone(),
            Rulebook {
                n_in: indices.len(),
                n_out: parents.len(),
                pairs,
            },
        ))
    }

    /// Kernel-2, stride-2 transposed convolution from `coarse` onto `fine`:
    /// each fine voxel reads its parent through the tap of its parity.
    /// Fine voxels whose parent is absent receive only the bias.
    pub fn upsample(coarse: &[Voxel], fine: &[Voxel]) -> Result<Rulebook> {
        check_sorted_unique(coarse)?;
        check_sorted_unique(fine)?;
        let lookup: HashMap<Voxel, u32> = coarse.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let mut pairs = vec![Vec::new(); 8];
        for (o, v) in fine.iter().enumerate() {
            if let Some(&i) = lookup.get(&v.map(|c| c / 2)) {
                pairs[parity(*v)].push((i, o as u32));
            }
        }
        Ok(Rulebook {
            n_in: coarse.len(),
            n_out: fine.len(),
            pairs,
        })
    }
}

fn parity(v: Voxel) -> usize {
    ((v[2] % 2) * 4 + (v[1] % 2) * 2 + v[0] % 2) as usize
}

impl<S: Scalar> Tape<S> {
    /// `x[n_in, Cin]`, `w[taps, Cin, Cout]`, optional `b[Cout]` ->
    /// `[n_out, Cout]`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, rules: Arc<Rulebook>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(
            xs.len() == 2 && xs[0] == rules.n_in,
            Error::ShapeMismatch(format!("sparse_conv: input {xs:?} for {} rows", rules.n_in))
        );
        let cin = xs[1];
        ensure!(
            ws.len() == 3 && ws[0] == rules.taps() && ws[1] == cin,
            Error::ShapeMismatch(format!("sparse_conv: weight {ws:?} for {} taps, {cin} channels", rules.taps()))
        );
        let cout = ws[2];
        if let Some(b) = b {
            ensure!(self.value(b).len() == cout, Error::ShapeMismatch("sparse_conv: bias length".into()));
        }
        let mut out = vec![S::zero(); rules.n_out * cout];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut gathered = Vec::new();
        let mut prod = Vec::new();
        for (tap, pairs) in rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let n = pairs.len();
            gathered.clear();
            for &(i, _) in pairs {
                gathered.extend_from_slice(&xd[i as usize * cin..(i as usize + 1) * cin]);
            }
            prod.clear();
            prod.resize(n * cout, S::zero());
            gemm(
                S::one(),
                MatRef::new(&gathered, n, cin),
                MatRef::new(&wd[tap * cin * cout..(tap + 1) * cin * cout], cin, cout),
                S::zero(),
                MatMut::new(&mut prod, n, cout),
            );
            for (k, &(_, o)) in pairs.iter().enumerate() {
                let dst = &mut out[o as usize * cout..(o as usize + 1) * cout];
                for (d, &p) in dst.iter_mut().zip(&prod[k * cout..(k + 1) * cout]) {
                    *d += p;
                }
            }
        }
        let value = Tensor::new(&[rules.n_out, cout], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            "sparse_conv",
            value,
            &parents,
            Box::new(move |inp, _, dy, needs| {
                let (xd, wd) = (&inp[0].data, &inp[1].data);
                let mut dx = needs[0].then(|| vec![S::zero(); rules.n_in * cin]);
                let mut dw = needs[1].then(|| vec![S::zero(); rules.taps() * cin * cout]);
                let mut gdy = Vec::new();
                let mut gx = Vec::new();
                let mut tmp = Vec::new();
                for (tap, pairs) in rules.pairs.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let n = pairs.len();
                    gdy.clear();
                    for &(_, o) in pairs {
                        gdy.extend_from_slice(&dy[o as usize * cout..(o as usize + 1) * cout]);
                    }
                    if let Some(dw) = &mut dw {
                        gx.clear();
                        for &(i, _) in pairs {
                            gx.extend_from_slice(&xd[i as usize * cin..(i as usize + 1) * cin]);
                        }
                        gemm(
                            S::one(),
                            MatRef::new(&gx, n, cin).t(),
                            MatRef::new(&gdy, n, cout),
                            S::one(),
                            MatMut::new(&mut dw[tap * cin * cout..(tap + 1) * cin * cout], cin, cout),
                        );
                    }
                    if let Some(dx) = &mut dx {
                        tmp.clear();
                        tmp.resize(n * cin, S::zero());
                        gemm(
                            S::one(),
                            MatRef::new(&gdy, n, cout),
                            MatRef::new(&wd[tap * cin * cout..(tap + 1) * cin * cout], cin, cout).t(),
                            S::zero(),
                            MatMut::new(&mut tmp, n, cin),
                        );
                        for (k, &(i, _)) in pairs.iter().enumerate() {
                            let dst = &mut dx[i as usize * cin..(i as usize + 1) * cin];
                            for (d, &v) in dst.iter_mut().zip(&tmp[k * cin..(k + 1) * cin]) {
                                *d += v;
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![S::zero(); cout];
                        for row in dy.chunks(cout) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Copies rows `rows[k]` of `x[N, C]` into a new `[rows.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<u32>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(xs.len() == 2, Error::ShapeMismatch(format!("gather_rows: {xs:?}")));
        let (n, c) = (xs[0], xs[1]);
        ensure!(
            rows.iter().all(|&r| (r as usize) < n),
            Error::ShapeMismatch("gather_rows: row out of range".into())
        );
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            out.extend_from_slice(&xd[r as usize * c..(r as usize + 1) * c]);
        }
        let value = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(
            "gather_rows",
            value,
            &[x],
            Box::new(move |_, _, g, _| {
                let mut gx = vec![S::zero(); n * c];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &v) in gx[r as usize * c..(r as usize + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d += v;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
