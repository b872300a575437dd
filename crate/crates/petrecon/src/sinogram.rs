//! Sinogram containers.
//!
//! A sinogram holds one row per (angle, bin) pair for every slice, stored
//! slice-major then angle-major with bins fastest:
//! `values[bin + n_bins*(angle + n_angles*slice)]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_slices: usize,
    pub n_angles: usize,
    pub n_bins: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_slices: usize, n_angles: usize, n_bins: usize) -> Self {
        Sinogram {
            n_slices,
            n_angles,
            n_bins,
            values: vec![0.0; n_slices * n_angles * n_bins],
        }
    }

    pub fn from_values(
        n_slices: usize,
        n_angles: usize,
        n_bins: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != n_slices * n_angles * n_bins {
            return Err(Error::Dimension(format!(
                "sinogram has {} values but {}x{}x{} needs {}",
                values.len(),
                n_slices,
                n_angles,
                n_bins,
                n_slices * n_angles * n_bins
            )));
        }
        Ok(Sinogram {
            n_slices,
            n_angles,
            n_bins,
            values,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.n_angles * self.n_bins
    }

    pub fn slice(&self, iz: usize) -> &[f64] {
        let n = self.slice_len();
        &self.values[iz * n..(iz + 1) * n]
    }

    pub fn slice_mut(&mut self, iz: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.values[iz * n..(iz + 1) * n]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &Sinogram) -> bool {
        self.n_slices == other.n_slices
            && self.n_angles == other.n_angles
            && self.n_bins == other.n_bins
    }
}

/// Known additive mean contributions to the measurement: scatter `s` and
/// randoms `r`, each a full sinogram of per-bin means.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanComponents {
    pub scatter: Sinogram,
    pub randoms: Sinogram,
}

impl MeanComponents {
    pub fn zeros(n_slices: usize, n_angles: usize, n_bins: usize) -> Self {
        MeanComponents {
            scatter: Sinogram::zeros(n_slices, n_angles, n_bins),
            randoms: Sinogram::zeros(n_slices, n_angles, n_bins),
        }
    }
}
