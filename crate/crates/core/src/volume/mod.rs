//! Scalar 3D volumes in a fixed canonical frame.
//!
//! Every volume handled by the pipeline uses the same axis convention:
//! axis 0 runs left to right, axis 1 posterior to anterior and axis 2
//! inferior to superior (RAS+). Voxels are stored with axis 0 varying
//! fastest, matching the on-disk NIfTI layout.

mod nifti;

pub use nifti::{load_volume, save_volume};

use crate::error::{Error, Result};

/// Voxels per side of a cubic sub-volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSize(usize);

impl PatchSize {
    /// Patch sizes used in the experimental grid.
    pub const GRID: [usize; 5] = [25, 30, 35, 40, 45];

    pub fn new(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("patch size must be >= 1".into()));
        }
        Ok(PatchSize(p))
    }

    pub fn get(self) -> usize {
        self.0
    }

    pub fn in_grid(self) -> bool {
        Self::GRID.contains(&self.0)
    }
}

impl std::fmt::Display for PatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A 3D scalar grid with voxel spacing (mm) and the world position of
/// voxel `(0, 0, 0)`.
///
/// Orientation is implicit: volumes are always canonical (RAS+), and
/// [`load_volume`] permutes and flips source data to get there.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Volume::new(dims, spacing, vec![value; n])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, spacing, data)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// Trilinear interpolation at a continuous voxel coordinate. Coordinates
    /// outside the grid are clamped to the boundary voxels.
    pub fn sample(&self, pos: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let max = (self.dims[a] - 1) as f64;
            let x = pos[a].clamp(0.0, max);
            let f = x.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.dims[a] - 1);
            frac[a] = x - f;
        }
        let v = |i: usize, j: usize, k: usize| self.data[self.index(i, j, k)] as f64;
        let [fx, fy, fz] = frac;
        let c00 = v(lo[0], lo[1], lo[2]) * (1.0 - fx) + v(hi[0], lo[1], lo[2]) * fx;
        let c10 = v(lo[0], hi[1], lo[2]) * (1.0 - fx) + v(hi[0], hi[1], lo[2]) * fx;
        let c01 = v(lo[0], lo[1], hi[2]) * (1.0 - fx) + v(hi[0], lo[1], hi[2]) * fx;
        let c11 = v(lo[0], hi[1], hi[2]) * (1.0 - fx) + v(hi[0], hi[1], hi[2]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Resamples onto a grid of `target` voxels covering the same physical
    /// extent. Voxel centres are aligned, so resampling to the current
    /// dimensions is the identity.
    pub fn resample(&self, target: [usize; 3]) -> Result<Volume> {
        if target.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "resample target {target:?} has a zero dimension"
            )));
        }
        if target == self.dims {
            return Ok(self.clone());
        }
        let scale: [f64; 3] =
            std::array::from_fn(|a| self.dims[a] as f64 / target[a] as f64);
        let coord = |a: usize, o: usize| (o as f64 + 0.5) * scale[a] - 0.5;
        let xs: Vec<f64> = (0..target[0]).map(|o| coord(0, o)).collect();
        let mut data = Vec::with_capacity(target.iter().product());
        for k in 0..target[2] {
            let z = coord(2, k);
            for j in 0..target[1] {
                let y = coord(1, j);
                for &x in &xs {
                    data.push(self.sample([x, y, z]) as f32);
                }
            }
        }
        let spacing = std::array::from_fn(|a| self.spacing[a] * scale[a]);
        // Keep the physical position of the grid's outer corner fixed.
        let origin = std::array::from_fn(|a| {
            self.origin[a] + 0.5 * (spacing[a] - self.spacing[a])
        });
        Ok(Volume {
            dims: target,
            spacing,
            origin,
            data,
        })
    }

    /// Mirrors the grid across the sagittal midplane (reverses axis 0).
    pub fn flip_lr(&self) -> Volume {
        let [nx, ny, nz] = self.dims;
        let mut data = Vec::with_capacity(self.data.len());
        for k in 0..nz {
            for j in 0..ny {
                let row = self.index(0, j, k);
                data.extend(self.data[row..row + nx].iter().rev());
            }
        }
        Volume {
            data,
            ..self.clone()
        }
    }

    /// Z-score normalization with the population standard deviation.
    /// Constant volumes map to all zeros.
    pub fn normalize_intensity(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let data = if std > 0.0 && std.is_finite() {
            self.data
                .iter()
                .map(|&v| ((v as f64 - mean) / std) as f32)
                .collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            data,
            ..self.clone()
        }
    }

    /// Copies the axis-aligned box `[start, start + size)`.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if size[a] == 0 || start[a] + size[a] > self.dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "crop window start {start:?} size {size:?} outside dims {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for k in start[2]..start[2] + size[2] {
            for j in start[1]..start[1] + size[1] {
                let row = self.index(start[0], j, k);
                data.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        let origin = std::array::from_fn(|a| self.origin[a] + start[a] as f64 * self.spacing[a]);
        Ok(Volume {
            dims: size,
            spacing: self.spacing,
            origin,
            data,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    /// Grid centre in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] as f64 - 1.0) / 2.0)
    }
}
