//! Image grid and voxel volumes.
//!
//! Volumes are dense, x-fastest (`values[ix + nx*(iy + ny*iz)]`), with an
//! isotropic voxel size in millimetres. The grid is centred on the origin:
//! voxel `(ix, iy)` spans `[x0 + ix*v, x0 + (ix+1)*v]` with
//! `x0 = -nx*v/2`, and slices are stacked along z the same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a voxel grid. Voxel size is in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size: f64,
}

impl Default for ImageGrid {
    fn default() -> Self {
        ImageGrid {
            nx: 64,
            ny: 64,
            nz: 9,
            voxel_size: 4.0,
        }
    }
}

impl ImageGrid {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Config(format!(
                "grid.nx, grid.ny, grid.nz must be positive: got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::Config(format!(
                "grid.voxel_size must be positive and finite: got {}",
                self.voxel_size
            )));
        }
        Ok(())
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Field of view extents (x, y, z) in millimetres.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.nx as f64 * self.voxel_size,
            self.ny as f64 * self.voxel_size,
            self.nz as f64 * self.voxel_size,
        ]
    }

    /// Centre of voxel `(ix, iy, iz)` in millimetres, grid centred on the origin.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let v = self.voxel_size;
        [
            (ix as f64 + 0.5) * v - self.nx as f64 * v / 2.0,
            (iy as f64 + 0.5) * v - self.ny as f64 * v / 2.0,
            (iz as f64 + 0.5) * v - self.nz as f64 * v / 2.0,
        ]
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        ix + self.nx * (iy + self.ny * iz)
    }
}

/// Dense activity image on an [`ImageGrid`]. Values are non-negative in
/// every public artifact; intermediate buffers may hold raw network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityVolume {
    pub grid: ImageGrid,
    pub values: Vec<f64>,
}

impl ActivityVolume {
    pub fn zeros(grid: ImageGrid) -> Self {
        ActivityVolume {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "volume has {} values but grid {}x{}x{} needs {}",
                values.len(),
                grid.nx,
                grid.ny,
                grid.nz,
                grid.len()
            )));
        }
        Ok(ActivityVolume { grid, values })
    }

    pub fn constant(grid: ImageGrid, value: f64) -> Self {
        ActivityVolume {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Borrow the values of slice `iz`.
    pub fn slice(&self, iz: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.values[iz * n..(iz + 1) * n]
    }

    pub fn slice_mut(&mut self, iz: usize) -> &mut [f64] {
        let n = self.grid.slice_len();
        &mut self.values[iz * n..(iz + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &ActivityVolume) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp_non_negative(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "{context}: volume contains non-finite values"
            )))
        }
    }
}

/// Integer tissue labels on an [`ImageGrid`], plus the label-to-tissue map
/// needed to look kinetic parameters up. Label 0 is always air.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: ImageGrid,
    pub labels: Vec<u32>,
    /// Tissue name per label, sorted by label.
    pub tissue_of: Vec<(u32, String)>,
}

impl LabelVolume {
    pub fn tissue_name(&self, label: u32) -> Option<&str> {
        self.tissue_of
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, name)| name.as_str())
    }

    /// Indices of all voxels carrying `label`.
    pub fn voxels_with_label(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == label).then_some(i))
            .collect()
    }
}
