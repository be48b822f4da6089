//! Elementwise arithmetic, activations, broadcasts and scalar reductions.

use crate::autodiff::scalar::Scalar;
use crate::autodiff::tape::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Where the channel axis sits: first (`[C, ...]`, dense volumes and
/// images) or last (`[N, C]`, sparse rows and MLP inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    ChannelFirst,
    ChannelLast,
}

impl Layout {
    /// `(channels, positions)` of a shape.
    pub fn split(self, shape: &[usize]) -> Result<(usize, usize)> {
        ensure!(
            !shape.is_empty(),
            Error::ShapeMismatch("layout needs at least one axis".into())
        );
        let total: usize = shape.iter().product();
        let c = match self {
            Layout::ChannelFirst => shape[0],
            Layout::ChannelLast => shape[shape.len() - 1],
        };
        Ok((c, if c == 0 { 0 } else { total / c }))
    }

    /// Flat offset of `(channel, position)`.
    #[inline]
    pub fn at(self, c: usize, p: usize, channels: usize, positions: usize) -> usize {
        match self {
            Layout::ChannelFirst => c * positions + p,
            Layout::ChannelLast => p * channels + c,
        }
    }
}

fn same_shape<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, op: &str) -> Result<()> {
    ensure!(
        tape.shape(a) == tape.shape(b),
        Error::ShapeMismatch(format!("{op}: {:?} vs {:?}", tape.shape(a), tape.shape(b)))
    );
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            "add",
            value,
            &[a, b],
            Box::new(|_, _, g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            "sub",
            value,
            &[a, b],
            Box::new(|_, _, g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&x| -x).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            "mul",
            value,
            &[a, b],
            Box::new(|inp, _, g, needs| {
                let ga = needs[0].then(|| g.iter().zip(&inp[1].data).map(|(&g, &y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(&inp[0].data).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64_lossy(c);
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x * c).collect(),
        };
        self.push(
            "scale",
            value,
            &[a],
            Box::new(move |_, _, g, _| vec![Some(g.iter().map(|&x| x * c).collect())]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x / (S::one() + (-x).exp())).collect(),
        };
        self.push(
            "silu",
            value,
            &[a],
            Box::new(|inp, _, g, _| {
                let d = inp[0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let s = S::one() / (S::one() + (-x).exp());
                        g * s * (S::one() + x * (S::one() - s))
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (S::from_f64_lossy(lo), S::from_f64_lossy(hi));
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().map(|&x| x.max(lo).min(hi)).collect(),
        };
        self.push(
            "clamp",
            value,
            &[a],
            Box::new(move |inp, _, g, _| {
                let d = inp[0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x < lo || x > hi { S::zero() } else { g })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push("reshape", value, &[a], Box::new(|_, _, g, _| vec![Some(g.to_vec())])))
    }

    /// Adds a per-channel vector `b[C]` to every position of `x`.
    pub fn add_channel(&mut self, x: Var, b: Var, layout: Layout) -> Result<Var> {
        let (c, p) = layout.split(self.shape(x))?;
        ensure!(
            self.value(b).len() == c,
            Error::ShapeMismatch(format!("add_channel: {c} channels, bias has {}", self.value(b).len()))
        );
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for ch in 0..c {
            for pos in 0..p {
                data[layout.at(ch, pos, c, p)] += bias[ch];
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(
            "add_channel",
            value,
            &[x, b],
            Box::new(move |_, _, g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![S::zero(); c];
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        for pos in 0..p {
                            *acc += g[layout.at(ch, pos, c, p)];
                        }
                    }
                    gb
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.data(a).iter().copied().sum();
        let n = self.value(a).len();
        self.push(
            "sum",
            Tensor::scalar(s),
            &[a],
            Box::new(move |_, _, g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        ensure!(n > 0, Error::ShapeMismatch("mean of an empty tensor".into()));
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mse")?;
        let n = self.value(a).len();
        ensure!(n > 0, Error::ShapeMismatch("mse of empty tensors".into()));
        let inv = S::one() / S::from_usize(n).expect("count fits");
        let s: S = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(
            "mse",
            Tensor::scalar(s * inv),
            &[a, b],
            Box::new(move |inp, _, g, needs| {
                let two = S::from_f64_lossy(2.0) * inv * g[0];
                let d: Vec<S> = inp[0].data.iter().zip(&inp[1].data).map(|(&x, &y)| two * (x - y)).collect();
                let gb = needs[1].then(|| d.iter().map(|&x| -x).collect());
                vec![needs[0].then_some(d), gb]
            }),
        ))
    }

    /// `sum(mask * (a - b)^2) / count(mask)` with a constant 0/1 mask.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        same_shape(self, a, b, "masked_mse")?;
        ensure!(
            mask.len() == self.value(a).len(),
            Error::ShapeMismatch("masked_mse: mask size".into())
        );
        let n = mask.iter().filter(|&&m| m).count();
        ensure!(n > 0, Error::Degenerate("masked_mse over an empty mask".into()));
        let inv = S::one() / S::from_usize(n).expect("count fits");
        let mask = mask.to_vec();
        let s: S = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((&x, &y), _)| (x - y) * (x - y))
            .sum();
        Ok(self.push(
            "masked_mse",
            Tensor::scalar(s * inv),
            &[a, b],
            Box::new(move |inp, _, g, needs| {
                let two = S::from_f64_lossy(2.0) * inv * g[0];
                let d: Vec<S> = inp[0]
                    .data
                    .iter()
                    .zip(&inp[1].data)
                    .zip(&mask)
                    .map(|((&x, &y), &m)| if m { two * (x - y) } else { S::zero() })
                    .collect();
                let gb = needs[1].then(|| d.iter().map(|&x| -x).collect());
                vec![needs[0].then_some(d), gb]
            }),
        ))
    }
}

/// Sinusoidal embedding of a (possibly fractional) timestep: the first half
/// holds `sin(t * f_i)`, the second `cos(t * f_i)`, with
/// `f_i = 10000^(-i / half)`.
pub fn timestep_embedding<S: Scalar>(t: f64, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = S::from_f64_lossy((t * f).sin());
        data[half + i] = S::from_f64_lossy((t * f).cos());
    }
    Tensor {
        shape: vec![dim],
        data,
    }
}
