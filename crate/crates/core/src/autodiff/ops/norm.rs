use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

use super::elementwise::Layout;

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    /// Group normalization with per-channel affine `gamma`, `beta` (`[C]`).
    /// Statistics are taken over all positions of each channel group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, layout: Layout) -> Result<Var> {
        let (c, p) = layout.split(self.shape(x))?;
        ensure!(
            groups > 0 && c % groups == 0,
            Error::ShapeMismatch(format!("group_norm: {c} channels not divisible into {groups} groups"))
        );
        ensure!(
            self.value(gamma).len() == c && self.value(beta).len() == c,
            Error::ShapeMismatch("group_norm: affine parameters need one value per channel".into())
        );
        ensure!(p > 0, Error::ShapeMismatch("group_norm over zero positions".into()));
        let cg = c / groups;
        let count = S::from_usize(cg * p).expect("count fits");
        let eps = S::from_f64_lossy(GROUP_NORM_EPS);
        let xd = self.data(x);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); groups];
        let mut out = vec![S::zero(); xd.len()];
        for g in 0..groups {
            let mut mean = S::zero();
            for ch in g * cg..(g + 1) * cg {
                for pos in 0..p {
                    mean += xd[layout.at(ch, pos, c, p)];
                }
            }
            mean /= count;
            let mut var = S::zero();
            for ch in g * cg..(g + 1) * cg {
                for pos in 0..p {
                    let d = xd[layout.at(ch, pos, c, p)] - mean;
                    var += d * d;
                }
            }
            var /= count;
            let is = S::one() / (var + eps).sqrt();
            inv_std[g] = is;
            for ch in g * cg..(g + 1) * cg {
                for pos in 0..p {
                    let i = layout.at(ch, pos, c, p);
                    xhat[i] = (xd[i] - mean) * is;
                    out[i] = xhat[i] * gm[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            "group_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |inp, _, dy, needs| {
                let gm = &inp[1].data;
                let gx = needs[0].then(|| {
                    let mut gx = vec![S::zero(); dy.len()];
                    for g in 0..groups {
                        let (mut m1, mut m2) = (S::zero(), S::zero());
                        for ch in g * cg..(g + 1) * cg {
                            for pos in 0..p {
                                let i = layout.at(ch, pos, c, p);
                                let d = dy[i] * gm[ch];
                                m1 += d;
                                m2 += d * xhat[i];
                            }
                        }
                        m1 /= count;
                        m2 /= count;
                        for ch in g * cg..(g + 1) * cg {
                            for pos in 0..p {
                                let i = layout.at(ch, pos, c, p);
                                gx[i] = inv_std[g] * (dy[i] * gm[ch] - m1 - xhat[i] * m2);
                            }
                        }
                    }
                    gx
                });
                let mut ggam = needs[1].then(|| vec![S::zero(); c]);
                let mut gbet = needs[2].then(|| vec![S::zero(); c]);
                if ggam.is_some() || gbet.is_some() {
                    for ch in 0..c {
                        for pos in 0..p {
                            let i = layout.at(ch, pos, c, p);
                            if let Some(v) = &mut ggam {
                                v[ch] += dy[i] * xhat[i];
                            }
                            if let Some(v) = &mut gbet {
                                v[ch] += dy[i];
                            }
                        }
                    }
                }
                vec![gx, ggam, gbet]
            }),
        ))
    }
}
