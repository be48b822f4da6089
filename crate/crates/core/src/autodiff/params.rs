//! Named parameters, Adam, and the `CKPT1` checkpoint format.
//!
//! `CKPT1` layout, little-endian: magic `b"CKPT1\0\0\0"`, `u64` Adam step,
//! `u32` tensor count, then per tensor (sorted by name) `u32` name length,
//! UTF-8 name, `u32` rank, `u64` dims, `u64` offset. Then `u64` total
//! element count followed by three `f32` sections of that length: values,
//! first moments, second moments.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

use super::tape::{Gradients, Tape, Tensor, Var};

const CKPT_MAGIC: &[u8; 8] = b"CKPT1\0\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    step: u64,
    /// Number of `accumulate` calls since the last optimizer step.
    pending: usize,
}

/// Tape handles of a store's parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Like [`Bound::get`] but panics: model code only asks for names it
    /// registered.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} was never registered"),
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f32>) -> Result<()> {
        let n: usize = shape.iter().product();
        ensure!(
            n == value.len(),
            Error::ShapeMismatch(format!("parameter {name}: shape {shape:?} vs {} values", value.len()))
        );
        ensure!(
            !self.params.contains_key(name),
            Error::InvalidArgument(format!("parameter {name} registered twice"))
        );
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                value,
                grad: vec![0.0; n],
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, shape, vec![0.0; shape.iter().product()])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, shape, vec![1.0; shape.iter().product()])
    }

    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut crate::rng::Rng) -> Result<()> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let value = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(rng) as f32)
            .collect();
        self.insert(name, shape, value)
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind<S: super::Scalar>(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let t = Tensor::from_f32(&p.shape, &p.value).expect("stored shapes are consistent");
                (k.clone(), tape.param(t))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients from one backward pass.
    pub fn accumulate<S: super::Scalar>(&mut self, bound: &Bound, grads: &Gradients<S>) {
        for (name, p) in &mut self.params {
            if let Some(g) = bound.vars.get(name).and_then(|&v| grads.get(v)) {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b.to_f64_lossy() as f32;
                }
            }
        }
        self.pending += 1;
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
        self.pending = 0;
    }

    /// One Adam update with bias correction on the mean of the accumulated
    /// gradients, then clears them. Errors when no gradients were
    /// accumulated since the previous step.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        ensure!(
            self.pending > 0,
            Error::InvalidArgument("adam_step without accumulated gradients".into())
        );
        ensure!(
            cfg.lr >= 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0,
            Error::InvalidArgument(format!("invalid Adam settings {cfg:?}"))
        );
        let mut scale = 1.0 / self.pending as f64;
        if cfg.clip_norm > 0.0 {
            let norm = self.grad_norm() * scale;
            if !norm.is_finite() {
                return Err(Error::Numerical("non-finite gradient norm".into()));
            }
            if norm > cfg.clip_norm {
                scale *= cfg.clip_norm / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for p in self.params.values_mut() {
            for i in 0..p.value.len() {
                let g = (p.grad[i] as f64 * scale) as f32;
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                if cfg.lr > 0.0 {
                    let mh = p.m[i] as f64 / bc1;
                    let vh = p.v[i] as f64 / bc2;
                    p.value[i] -= (cfg.lr * mh / (vh.sqrt() + cfg.eps)) as f32;
                }
            }
            p.grad.fill(0.0);
        }
        self.pending = 0;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += p.value.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for section in 0..3 {
            for p in self.params.values() {
                let data = match section {
                    0 => &p.value,
                    1 => &p.m,
                    _ => &p.v,
                };
                for x in data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<ParameterStore, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err("not a CKPT1 checkpoint".into());
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let total = r.u64()? as usize;
        let mut sections = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = r.take(total.checked_mul(4).ok_or("size overflow")?)?;
            sections.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect::<Vec<f32>>(),
            );
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        let mut params = BTreeMap::new();
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = offset.checked_add(n).filter(|&e| e <= total).ok_or("tensor outside data section")?;
            let take = |s: &Vec<f32>| s[offset..end].to_vec();
            let p = Param {
                shape,
                value: take(&sections[0]),
                grad: vec![0.0; n],
                m: take(&sections[1]),
                v: take(&sections[2]),
            };
            if params.insert(name.clone(), p).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
        }
        Ok(ParameterStore {
            params,
            step,
            pending: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParameterStore> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, pa), (b, pb))| a == b && pa.shape == pb.shape)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
