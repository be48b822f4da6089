//! Conditional 3D UNet over dense grids or sparse index hierarchies. The
//! condition volume of each level is concatenated at the level's first
//! block; the time embedding (plus any global condition) is added per block.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{timestep_embedding, Bound, Layout, ParameterStore, Rulebook, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::rng::Rng;

use super::condition::Conditioning;
use super::nn::{Conv, GroupNorm, Init, Linear, SparseConv, Upsample};
use super::sparse::SparseHierarchy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Channels per level, finest first; the level count is its length.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            widths: vec![16, 32, 64, 64],
            res_blocks: 2,
            time_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            key: format!("{key}.{field}"),
            message: message.into(),
        };
        ensure!(!self.widths.is_empty(), bad("widths", "needs at least one level"));
        ensure!(self.widths.iter().all(|&w| w > 0), bad("widths", "must be positive"));
        ensure!(self.res_blocks >= 1, bad("res_blocks", "must be >= 1"));
        ensure!(
            self.time_dim >= 2 && self.time_dim % 2 == 0,
            bad("time_dim", "must be even and >= 2")
        );
        Ok(())
    }
}

/// Where a forward pass runs.
#[derive(Clone, Copy)]
pub enum Grid<'a> {
    Dense,
    Sparse(&'a SparseHierarchy),
}

impl Grid<'_> {
    fn layout(&self) -> Layout {
        match self {
            Grid::Dense => Layout::ChannelFirst,
            Grid::Sparse(_) => Layout::ChannelLast,
        }
    }

    fn channel_axis(&self) -> usize {
        match self {
            Grid::Dense => 0,
            Grid::Sparse(_) => 1,
        }
    }
}

/// A 3x3x3 same-resolution convolution in either flavor.
#[derive(Clone, Debug)]
enum Conv3 {
    Dense(Conv),
    Sparse(SparseConv),
}

impl Conv3 {
    fn new(name: &str, cin: usize, cout: usize, sparse: bool) -> Self {
        if sparse {
            Conv3::Sparse(SparseConv {
                name: name.into(),
                cin,
                cout,
                taps: 27,
            })
        } else {
            Conv3::Dense(Conv::cube(name, cin, cout, 3, 1))
        }
    }

    fn init(&self, store: &mut ParameterStore, init: Init, rng: &mut Rng) -> Result<()> {
        match self {
            Conv3::Dense(c) => c.init(store, init, rng),
            Conv3::Sparse(c) => c.init(store, init, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, rules: Option<&Arc<Rulebook>>) -> Result<Var> {
        match (self, rules) {
            (Conv3::Dense(c), None) => c.forward(tape, p, x),
            (Conv3::Sparse(c), Some(r)) => c.forward(tape, p, x, r),
            _ => Err(Error::InvalidArgument("dense/sparse layer mismatch".into())),
        }
    }
}

/// 1x1 projection: a pointwise convolution or a row-wise linear map.
#[derive(Clone, Debug)]
enum Pointwise {
    Dense(Conv),
    Sparse(Linear),
}

impl Pointwise {
    fn new(name: &str, cin: usize, cout: usize, sparse: bool) -> Self {
        if sparse {
            Pointwise::Sparse(Linear::new(name, cin, cout))
        } else {
            Pointwise::Dense(Conv::cube(name, cin, cout, 1, 1))
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        match self {
            Pointwise::Dense(c) => c.init(store, Init::Normal, rng),
            Pointwise::Sparse(l) => l.init(store, Init::Normal, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Pointwise::Dense(c) => c.forward(tape, p, x),
            Pointwise::Sparse(l) => l.forward(tape, p, x),
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv3,
    skip: Option<Pointwise>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, time_dim: usize, sparse: bool) -> Self {
        ResBlock {
            norm1: GroupNorm::new(&format!("{name}.n1"), cin),
            conv1: Conv3::new(&format!("{name}.c1"), cin, cout, sparse),
            temb: Linear::new(&format!("{name}.t"), time_dim, cout),
            norm2: GroupNorm::new(&format!("{name}.n2"), cout),
            conv2: Conv3::new(&format!("{name}.c2"), cout, cout, sparse),
            skip: (cin != cout).then(|| Pointwise::new(&format!("{name}.skip"), cin, cout, sparse)),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        self.norm1.init(store)?;
        self.conv1.init(store, Init::Normal, rng)?;
        self.temb.init(store, Init::Normal, rng)?;
        self.norm2.init(store)?;
        self.conv2.init(store, Init::Normal, rng)?;
        if let Some(s) = &self.skip {
            s.init(store, rng)?;
        }
        Ok(())
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, temb: Var, grid: Grid, rules: Option<&Arc<Rulebook>>) -> Result<Var> {
        let layout = grid.layout();
        let h = self.norm1.forward(tape, p, x, layout)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h, rules)?;
        let t = self.temb.forward(tape, p, temb)?;
        let t = tape.reshape(t, &[self.temb.fout])?;
        let h = tape.add_channel(h, t, layout)?;
        let h = self.norm2.forward(tape, p, h, layout)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h, rules)?;
        let s = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

#[derive(Clone, Debug)]
enum Resample {
    DenseDown(Conv),
    DenseUp(Upsample),
    Sparse(SparseConv),
}

impl Resample {
    fn down(name: &str, cin: usize, cout: usize, sparse: bool) -> Self {
        if sparse {
            Resample::Sparse(SparseConv {
                name: name.into(),
                cin,
                cout,
                taps: 8,
            })
        } else {
            Resample::DenseDown(Conv {
                name: name.into(),
                cin,
                cout,
                kernel: [2; 3],
                stride: [2; 3],
                pad: [0; 3],
            })
        }
    }

    fn up(name: &str, cin: usize, cout: usize, sparse: bool) -> Self {
        if sparse {
            Resample::Sparse(SparseConv {
                name: name.into(),
                cin,
                cout,
                taps: 8,
            })
        } else {
            Resample::DenseUp(Upsample {
                name: name.into(),
                cin,
                cout,
            })
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        match self {
            Resample::DenseDown(c) => c.init(store, Init::Normal, rng),
            Resample::DenseUp(u) => u.init(store, rng),
            Resample::Sparse(c) => c.init(store, Init::Normal, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, rules: Option<&Arc<Rulebook>>) -> Result<Var> {
        match (self, rules) {
            (Resample::DenseDown(c), None) => c.forward(tape, p, x),
            (Resample::DenseUp(u), None) => u.forward(tape, p, x),
            (Resample::Sparse(c), Some(r)) => c.forward(tape, p, x, r),
            _ => Err(Error::InvalidArgument("dense/sparse layer mismatch".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub sparse: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub cond_channels: usize,
    /// Channels concatenated right before the output convolution.
    pub final_channels: usize,
    time: (Linear, Linear),
    conv_in: Conv3,
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Resample>,
    up: Vec<Resample>,
    dec: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    conv_out: Conv3,
}

impl UNet {
    pub fn new(
        prefix: &str,
        cfg: UNetConfig,
        sparse: bool,
        in_channels: usize,
        out_channels: usize,
        cond_channels: usize,
        final_channels: usize,
    ) -> Result<Self> {
        cfg.validate(prefix)?;
        let w = &cfg.widths;
        let e = cfg.time_dim;
        let levels = w.len();
        let blocks = |name: String, cin: usize, cout: usize| -> Vec<ResBlock> {
            (0..cfg.res_blocks)
                .map(|j| ResBlock::new(&format!("{name}.{j}"), if j == 0 { cin } else { cout }, cout, e, sparse))
                .collect()
        };
        Ok(UNet {
            time: (
                Linear::new(&format!("{prefix}.time0"), e, e),
                Linear::new(&format!("{prefix}.time1"), e, e),
            ),
            conv_in: Conv3::new(&format!("{prefix}.in"), in_channels, w[0], sparse),
            enc: (0..levels)
                .map(|l| blocks(format!("{prefix}.enc{l}"), w[l] + cond_channels, w[l]))
                .collect(),
            down: (1..levels)
                .map(|l| Resample::down(&format!("{prefix}.down{l}"), w[l - 1], w[l], sparse))
                .collect(),
            up: (0..levels - 1)
                .map(|l| Resample::up(&format!("{prefix}.up{l}"), w[l + 1], w[l], sparse))
                .collect(),
            dec: (0..levels - 1)
                .map(|l| blocks(format!("{prefix}.dec{l}"), 2 * w[l], w[l]))
                .collect(),
            out_norm: GroupNorm::new(&format!("{prefix}.out.gn"), w[0]),
            conv_out: Conv3::new(&format!("{prefix}.out"), w[0] + final_channels, out_channels, sparse),
            cfg,
            sparse,
            in_channels,
            out_channels,
            cond_channels,
            final_channels,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        self.time.0.init(store, Init::Normal, rng)?;
        self.time.1.init(store, Init::Normal, rng)?;
        self.conv_in.init(store, Init::Normal, rng)?;
        for b in self.enc.iter().chain(&self.dec).flatten() {
            b.init(store, rng)?;
        }
        for r in self.down.iter().chain(&self.up) {
            r.init(store, rng)?;
        }
        self.out_norm.init(store)?;
        self.conv_out.init(store, Init::Zero, rng)
    }

    /// Predicts the clean signal from `x` at timestep `t`. Dense `x` is
    /// `[Cin, R, R, R]`, sparse `x` is `[N, Cin]` on the finest hierarchy
    /// level. `final_extra` carries `final_channels` per position.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        x: Var,
        t: f64,
        cond: &Conditioning,
        grid: Grid,
        final_extra: Option<Var>,
    ) -> Result<Var> {
        let levels = self.cfg.levels();
        ensure!(
            cond.pyramid.len() == levels,
            Error::ShapeMismatch(format!(
                "condition pyramid has {} levels, UNet {levels}",
                cond.pyramid.len()
            ))
        );
        ensure!(
            matches!(grid, Grid::Sparse(_)) == self.sparse,
            Error::InvalidArgument("dense/sparse grid mismatch".into())
        );
        if let Grid::Sparse(h) = grid {
            ensure!(
                h.levels.len() == levels,
                Error::ShapeMismatch(format!("index hierarchy has {} levels, UNet {levels}", h.levels.len()))
            );
        }
        ensure!(
            final_extra.is_some() == (self.final_channels > 0),
            Error::InvalidArgument("final-layer extra channels do not match the UNet".into())
        );
        let e = self.cfg.time_dim;
        let axis = grid.channel_axis();
        let sub = |l: usize| match grid {
            Grid::Dense => None,
            Grid::Sparse(h) => Some(&h.sub[l]),
        };

        let emb = tape.constant(timestep_embedding(t, e));
        let emb = tape.reshape(emb, &[1, e])?;
        let h = self.time.0.forward(tape, p, emb)?;
        let h = tape.silu(h);
        let mut temb = self.time.1.forward(tape, p, h)?;
        if let Some(g) = cond.global {
            let g = tape.reshape(g, &[1, e])?;
            temb = tape.add(temb, g)?;
        }
        let temb = tape.silu(temb);

        let mut h = self.conv_in.forward(tape, p, x, sub(0))?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                let rules = match grid {
                    Grid::Dense => None,
                    Grid::Sparse(hier) => Some(&hier.down[l - 1]),
                };
                h = self.down[l - 1].forward(tape, p, h, rules)?;
            }
            h = tape.concat(&[h, cond.pyramid[l]], axis)?;
            for b in &self.enc[l] {
                h = b.forward(tape, p, h, temb, grid, sub(l))?;
            }
            skips.push(h);
        }
        for l in (0..levels - 1).rev() {
            let rules = match grid {
                Grid::Dense => None,
                Grid::Sparse(hier) => Some(&hier.up[l]),
            };
            h = self.up[l].forward(tape, p, h, rules)?;
            h = tape.concat(&[h, skips[l]], axis)?;
            for b in &self.dec[l] {
                h = b.forward(tape, p, h, temb, grid, sub(l))?;
            }
        }
        let h = self.out_norm.forward(tape, p, h, grid.layout())?;
        let mut h = tape.silu(h);
        if let Some(extra) = final_extra {
            h = tape.concat(&[h, extra], axis)?;
        }
        self.conv_out.forward(tape, p, h, sub(0))
    }
}
