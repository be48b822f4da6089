//! Parameterized layers on top of the tape operators. Each layer knows its
//! parameter names and registers them in a [`ParameterStore`].

use std::sync::Arc;

use crate::autodiff::{Bound, Layout, ParameterStore, Rulebook, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Weight initialization gain for layers followed by SiLU.
const GAIN: f64 = 1.4;

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with `GAIN / sqrt(fan_in)`.
    Normal,
    Zero,
}

/// Dense convolution `[Cin, D, H, W] -> [Cout, ...]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv {
    /// Cubic kernel `k` with "same" padding.
    pub fn cube(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [k / 2; 3],
        }
    }

    /// 2D kernel on depth-1 volumes.
    pub fn planar(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, k / 2, k / 2],
        }
    }

    pub fn init(&self, store: &mut ParameterStore, init: Init, rng: &mut Rng) -> Result<()> {
        let shape = [self.cout, self.cin, self.kernel[0], self.kernel[1], self.kernel[2]];
        let fan_in = self.cin * self.kernel.iter().product::<usize>();
        match init {
            Init::Normal => store.normal(&format!("{}.w", self.name), &shape, fan_in, GAIN, rng)?,
            Init::Zero => store.zeros(&format!("{}.w", self.name), &shape)?,
        }
        store.zeros(&format!("{}.b", self.name), &[self.cout])
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Kernel-2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Upsample {
    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        store.normal(&format!("{}.w", self.name), &[self.cin, self.cout, 2, 2, 2], self.cin, GAIN, rng)?;
        store.zeros(&format!("{}.b", self.name), &[self.cout])
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.conv_transpose3d(x, w, Some(b))
    }
}

/// Sparse convolution `[N, Cin] -> [M, Cout]` with `taps` kernel offsets.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub taps: usize,
}

impl SparseConv {
    pub fn init(&self, store: &mut ParameterStore, init: Init, rng: &mut Rng) -> Result<()> {
        let shape = [self.taps, self.cin, self.cout];
        match init {
            Init::Normal => store.normal(&format!("{}.w", self.name), &shape, self.cin * self.taps, GAIN, rng)?,
            Init::Zero => store.zeros(&format!("{}.w", self.name), &shape)?,
        }
        store.zeros(&format!("{}.b", self.name), &[self.cout])
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, rules: &Arc<Rulebook>) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.sparse_conv(x, w, Some(b), rules.clone())
    }
}

/// Fully connected `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            name: name.into(),
            fin,
            fout,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, init: Init, rng: &mut Rng) -> Result<()> {
        match init {
            Init::Normal => store.normal(&format!("{}.w", self.name), &[self.fout, self.fin], self.fin, GAIN, rng)?,
            Init::Zero => store.zeros(&format!("{}.w", self.name), &[self.fout, self.fin])?,
        }
        store.zeros(&format!("{}.b", self.name), &[self.fout])
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        GroupNorm {
            name: name.into(),
            channels,
            groups: groups_for(channels),
        }
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        store.ones(&format!("{}.g", self.name), &[self.channels])?;
        store.zeros(&format!("{}.b", self.name), &[self.channels])
    }

    pub fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, layout: Layout) -> Result<Var> {
        let g = p.get(&format!("{}.g", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.group_norm(x, g, b, self.groups, layout)
    }
}
