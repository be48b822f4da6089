use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::Vec3;

use super::mesh::EXTENT_HALF;

/// Integer voxel coordinate `(i, j, k)` along `(x, y, z)`.
pub type Voxel = [u32; 3];

/// Grid geometry shared by every volume: `resolution` cells per axis over
/// the fixed cube `[-0.5, 0.5]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub resolution: usize,
    /// Occupancy threshold on `|sdf|`, world units.
    pub tau: f32,
    /// SDF truncation band, world units.
    pub truncation: f32,
}

impl VolumeSpec {
    /// Defaults: `tau` = 1 voxel, truncation = 3 voxels.
    pub fn new(resolution: usize) -> Result<Self> {
        let vs = 1.0 / resolution as f32;
        Self::with_thresholds(resolution, vs, 3.0 * vs)
    }

    pub fn with_thresholds(resolution: usize, tau: f32, truncation: f32) -> Result<Self> {
        let spec = VolumeSpec {
            resolution,
            tau,
            truncation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.resolution >= 2 && self.resolution.is_power_of_two() && self.resolution <= 1 << 15,
            Error::InvalidArgument(format!(
                "resolution {} must be a power of two in [2, 32768]",
                self.resolution
            ))
        );
        ensure!(
            self.tau > 0.0 && self.tau.is_finite(),
            Error::InvalidArgument(format!("occupancy threshold {} must be > 0", self.tau))
        );
        ensure!(
            self.truncation >= self.tau && self.truncation.is_finite(),
            Error::InvalidArgument(format!(
                "truncation {} must be >= occupancy threshold {}",
                self.truncation, self.tau
            ))
        );
        Ok(())
    }

    pub fn extent_min(&self) -> f64 {
        -EXTENT_HALF
    }

    pub fn extent_width(&self) -> f64 {
        2.0 * EXTENT_HALF
    }

    pub fn voxel_size(&self) -> f64 {
        self.extent_width() / self.resolution as f64
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn cell_center(&self, v: Voxel) -> Vec3 {
        let vs = self.voxel_size();
        Vec3::new(
            self.extent_min() + (v[0] as f64 + 0.5) * vs,
            self.extent_min() + (v[1] as f64 + 0.5) * vs,
            self.extent_min() + (v[2] as f64 + 0.5) * vs,
        )
    }

    /// Continuous grid coordinates where cell centers sit at integers.
    pub fn world_to_grid(&self, p: Vec3) -> Vec3 {
        (p - Vec3::splat(self.extent_min())) / self.voxel_size() - Vec3::splat(0.5)
    }

    /// Linear offset of a voxel in x-fastest order.
    pub fn linear(&self, v: Voxel) -> usize {
        let r = self.resolution;
        (v[2] as usize * r + v[1] as usize) * r + v[0] as usize
    }

    pub fn voxel(&self, linear: usize) -> Voxel {
        let r = self.resolution;
        [(linear % r) as u32, ((linear / r) % r) as u32, (linear / (r * r)) as u32]
    }

    pub fn contains(&self, v: Voxel) -> bool {
        v.iter().all(|&c| (c as usize) < self.resolution)
    }

    /// Same thresholds in world units, twice the resolution.
    pub fn refined(&self, tau_voxels: f32, truncation_voxels: f32) -> Result<VolumeSpec> {
        let r = self.resolution * 2;
        let vs = 1.0 / r as f32;
        VolumeSpec::with_thresholds(r, tau_voxels * vs, truncation_voxels * vs)
    }
}

/// Dense volume, channel-planar: `data[((c * R + k) * R + j) * R + i]`, so x
/// varies fastest within each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVolume {
    pub spec: VolumeSpec,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DenseVolume {
    pub fn zeros(spec: VolumeSpec, channels: usize) -> Self {
        Self::filled(spec, channels, 0.0)
    }

    pub fn filled(spec: VolumeSpec, channels: usize, value: f32) -> Self {
        DenseVolume {
            spec,
            channels,
            data: vec![value; spec.num_cells() * channels],
        }
    }

    pub fn from_data(spec: VolumeSpec, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == spec.num_cells() * channels,
            Error::ShapeMismatch(format!(
                "dense volume needs {} values, got {}",
                spec.num_cells() * channels,
                data.len()
            ))
        );
        Ok(DenseVolume {
            spec,
            channels,
            data,
        })
    }

    pub fn get(&self, c: usize, v: Voxel) -> f32 {
        self.data[c * self.spec.num_cells() + self.spec.linear(v)]
    }

    pub fn set(&mut self, c: usize, v: Voxel, value: f32) {
        let n = self.spec.num_cells();
        let l = self.spec.linear(v);
        self.data[c * n + l] = value;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spec.num_cells();
        &self.data[c * n..(c + 1) * n]
    }

    /// Sorted voxels whose channel-0 value is nonzero.
    pub fn nonzero_voxels(&self) -> Vec<Voxel> {
        let mut out: Vec<Voxel> = self
            .channel(0)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(l, _)| self.spec.voxel(l))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn count_nonzero(&self) -> usize {
        self.channel(0).iter().filter(|&&v| v != 0.0).count()
    }

    /// Gathers every channel at `indices` into a sparse volume.
    pub fn sparsify(&self, indices: &[Voxel]) -> Result<SparseVolume> {
        let mut values = Vec::with_capacity(indices.len() * self.channels);
        for &v in indices {
            ensure!(
                self.spec.contains(v),
                Error::InvalidArgument(format!("voxel {v:?} outside resolution"))
            );
            for c in 0..self.channels {
                values.push(self.get(c, v));
            }
        }
        SparseVolume::new(self.spec, indices.to_vec(), self.channels, values)
    }
}

/// Sparse volume: strictly sorted unique voxels, each with `width` values
/// stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVolume {
    pub spec: VolumeSpec,
    pub indices: Vec<Voxel>,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SparseVolume {
    pub fn new(spec: VolumeSpec, indices: Vec<Voxel>, width: usize, values: Vec<f32>) -> Result<Self> {
        let sv = SparseVolume {
            spec,
            indices,
            width,
            values,
        };
        sv.validate()?;
        Ok(sv)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.values.len() == self.indices.len() * self.width,
            Error::ShapeMismatch(format!(
                "{} values for {} voxels of width {}",
                self.values.len(),
                self.indices.len(),
                self.width
            ))
        );
        check_sorted_unique(&self.indices)?;
        if let Some(v) = self.indices.iter().find(|v| !self.spec.contains(**v)) {
            return Err(Error::InvalidArgument(format!(
                "voxel {v:?} outside resolution {}",
                self.spec.resolution
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn value(&self, n: usize) -> &[f32] {
        &self.values[n * self.width..(n + 1) * self.width]
    }

    pub fn find(&self, v: Voxel) -> Option<usize> {
        self.indices.binary_search(&v).ok()
    }

    /// Scatters into a dense volume; cells not in the index set take `fill`
    /// (one value per channel).
    pub fn densify(&self, fill: &[f32]) -> Result<DenseVolume> {
        ensure!(
            fill.len() == self.width,
            Error::ShapeMismatch(format!("fill has {} channels, need {}", fill.len(), self.width))
        );
        let n = self.spec.num_cells();
        let mut data = Vec::with_capacity(n * self.width);
        for &f in fill {
            data.extend(std::iter::repeat_n(f, n));
        }
        for (idx, &v) in self.indices.iter().enumerate() {
            let l = self.spec.linear(v);
            for c in 0..self.width {
                data[c * n + l] = self.values[idx * self.width + c];
            }
        }
        DenseVolume::from_data(self.spec, self.width, data)
    }
}

pub fn check_sorted_unique(indices: &[Voxel]) -> Result<()> {
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "voxel indices not strictly sorted at {:?} >= {:?}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Point cloud with one RGB color in `[0, 1]` per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f32; 3]>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, c: [f32; 3]) {
        self.points.push(p);
        self.colors.push(c);
    }
}
