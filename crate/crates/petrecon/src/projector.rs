//! Parallel-beam projector as an explicit sparse matrix.
//!
//! The system is 2D per slice: every slice of the volume is projected with
//! the same matrix. A row corresponds to one (angle, bin) pair and stores
//! the averaged intersection lengths (mm) of `rays_per_bin` sub-rays with
//! the pixel grid, computed by incremental Siddon traversal.
//!
//! Both a row-major (CSR) and a column-major (CSC) copy of the matrix are
//! kept so that forward and back projection each walk memory linearly and
//! accumulate in a fixed order. Back projection via the CSC copy is the
//! exact transpose of forward projection by construction, which makes the
//! adjoint identity `<Px, y> = <x, P'y>` hold to rounding error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sinogram::Sinogram;
use crate::volume::{ActivityVolume, ImageGrid};

/// Parallel-beam sampling geometry.
///
/// Angle `a` is `a * pi / n_angles`; bin `b` is centred at radial offset
/// `(b - (n_bins - 1)/2) * bin_spacing` mm. Each bin is sampled by
/// `rays_per_bin` parallel sub-rays spread uniformly over the bin width,
/// and their chord lengths are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScannerGeometry {
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_spacing: f64,
    pub rays_per_bin: usize,
}

impl Default for ScannerGeometry {
    fn default() -> Self {
        ScannerGeometry {
            n_angles: 90,
            n_bins: 96,
            bin_spacing: 2.8,
            rays_per_bin: 3,
        }
    }
}

impl ScannerGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 {
            return Err(Error::Config("scanner.n_angles must be positive".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("scanner.n_bins must be positive".into()));
        }
        if !(self.bin_spacing > 0.0) || !self.bin_spacing.is_finite() {
            return Err(Error::Config(format!(
                "scanner.bin_spacing must be positive and finite: got {}",
                self.bin_spacing
            )));
        }
        if self.rays_per_bin == 0 {
            return Err(Error::Config("scanner.rays_per_bin must be positive".into()));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_angles * self.n_bins
    }
}

/// One (pixel, chord length) entry of a matrix row.
type RowEntry = (u32, f64);

/// Sparse per-slice system matrix with precomputed transpose and sensitivity.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    pub geometry: ScannerGeometry,
    pub nx: usize,
    pub ny: usize,
    /// CSR: rows are (angle, bin) pairs, columns are in-slice pixel indices.
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    val: Vec<f64>,
    /// CSC copy: per pixel, the rows that see it in ascending row order.
    csc_ptr: Vec<usize>,
    csc_row: Vec<u32>,
    csc_val: Vec<f64>,
    /// Column sums `p_j` (a.k.a. sensitivity), length nx*ny.
    pub sensitivity: Vec<f64>,
}

impl SystemMatrix {
    /// Build the matrix for one slice of `grid` under `geometry`.
    pub fn build(grid: &ImageGrid, geometry: &ScannerGeometry) -> Result<SystemMatrix> {
        grid.validate()?;
        geometry.validate()?;
        let nx = grid.nx;
        let ny = grid.ny;
        let v = grid.voxel_size;
        let n_rows = geometry.n_rows();
        let n_cols = nx * ny;

        let rows: Vec<Vec<RowEntry>> = (0..n_rows)
            .into_par_iter()
            .map(|row| {
                let angle = row / geometry.n_bins;
                let bin = row % geometry.n_bins;
                trace_bin(grid, geometry, angle, bin)
            })
            .collect();

        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut val = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for entries in &rows {
            for &(j, w) in entries {
                col_idx.push(j);
                val.push(w);
            }
            row_ptr.push(col_idx.len());
        }

        // Transpose by counting sort on column index; within a column the
        // rows come out in ascending order because CSR is walked in order.
        let mut counts = vec![0usize; n_cols + 1];
        for &j in &col_idx {
            counts[j as usize + 1] += 1;
        }
        for j in 0..n_cols {
            counts[j + 1] += counts[j];
        }
        let csc_ptr = counts.clone();
        let mut cursor = counts;
        let mut csc_row = vec![0u32; nnz];
        let mut csc_val = vec![0.0; nnz];
        for row in 0..n_rows {
            for k in row_ptr[row]..row_ptr[row + 1] {
                let j = col_idx[k] as usize;
                let dst = cursor[j];
                csc_row[dst] = row as u32;
                csc_val[dst] = val[k];
                cursor[j] += 1;
            }
        }

        let sensitivity: Vec<f64> = (0..n_cols)
            .map(|j| csc_val[csc_ptr[j]..csc_ptr[j + 1]].iter().sum())
            .collect();

        let max_chord = (2.0 * v * v).sqrt();
        debug_assert!(val.iter().all(|&w| w > 0.0 && w <= max_chord + 1e-9));

        Ok(SystemMatrix {
            geometry: *geometry,
            nx,
            ny,
            row_ptr,
            col_idx,
            val,
            csc_ptr,
            csc_row,
            csc_val,
            sensitivity,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.nx * self.ny
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    /// Entries of one matrix row, in ascending pixel order.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.val[lo..hi])
            .map(|(&j, &w)| (j as usize, w))
    }

    /// Column sums recomputed from the CSR side; for validation only.
    pub fn column_sums_from_rows(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols()];
        for k in 0..self.val.len() {
            sums[self.col_idx[k] as usize] += self.val[k];
        }
        sums
    }

    /// Forward projection of one slice: `y = P x`.
    pub fn project_slice(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols());
        assert_eq!(y.len(), self.n_rows());
        y.par_iter_mut().enumerate().for_each(|(row, out)| {
            let lo = self.row_ptr[row];
            let hi = self.row_ptr[row + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.val[k] * x[self.col_idx[k] as usize];
            }
            *out = acc;
        });
    }

    /// Back projection of one slice: `x = P' y`, accumulated per pixel in
    /// ascending row order so the result is independent of thread count.
    pub fn back_project_slice(&self, y: &[f64], x: &mut [f64]) {
        assert_eq!(y.len(), self.n_rows());
        assert_eq!(x.len(), self.n_cols());
        x.par_iter_mut().enumerate().for_each(|(j, out)| {
            let lo = self.csc_ptr[j];
            let hi = self.csc_ptr[j + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.csc_val[k] * y[self.csc_row[k] as usize];
            }
            *out = acc;
        });
    }

    /// Forward projection of a whole volume, slice by slice.
    pub fn forward_project(&self, volume: &ActivityVolume) -> Result<Sinogram> {
        if volume.grid.nx != self.nx || volume.grid.ny != self.ny {
            return Err(Error::Dimension(format!(
                "volume slice {}x{} does not match matrix {}x{}",
                volume.grid.nx, volume.grid.ny, self.nx, self.ny
            )));
        }
        let mut sino = Sinogram::zeros(volume.grid.nz, self.geometry.n_angles, self.geometry.n_bins);
        for iz in 0..volume.grid.nz {
            self.project_slice(volume.slice(iz), sino.slice_mut(iz));
        }
        Ok(sino)
    }

    /// Back projection of a whole sinogram, slice by slice.
    pub fn back_project(&self, sino: &Sinogram, grid: &ImageGrid) -> Result<ActivityVolume> {
        if sino.n_angles != self.geometry.n_angles || sino.n_bins != self.geometry.n_bins {
            return Err(Error::Dimension(format!(
                "sinogram {}x{} does not match scanner {}x{}",
                sino.n_angles, sino.n_bins, self.geometry.n_angles, self.geometry.n_bins
            )));
        }
        if grid.nx != self.nx || grid.ny != self.ny || grid.nz != sino.n_slices {
            return Err(Error::Dimension(
                "grid does not match matrix/sinogram shape".into(),
            ));
        }
        let mut vol = ActivityVolume::zeros(*grid);
        for iz in 0..grid.nz {
            self.back_project_slice(sino.slice(iz), vol.slice_mut(iz));
        }
        Ok(vol)
    }
}

/// Average the sub-ray traversals of one (angle, bin) pair into a sparse row.
fn trace_bin(
    grid: &ImageGrid,
    geometry: &ScannerGeometry,
    angle: usize,
    bin: usize,
) -> Vec<RowEntry> {
    let nx = grid.nx;
    let ny = grid.ny;
    let phi = angle as f64 * std::f64::consts::PI / geometry.n_angles as f64;
    let (sin_phi, cos_phi) = phi.sin_cos();
    let dir = [-sin_phi, cos_phi];
    let s_center = (bin as f64 - (geometry.n_bins as f64 - 1.0) / 2.0) * geometry.bin_spacing;

    let mut acc = vec![0.0f64; nx * ny];
    let mut touched: Vec<u32> = Vec::new();
    let weight = 1.0 / geometry.rays_per_bin as f64;
    for k in 0..geometry.rays_per_bin {
        let frac = (k as f64 + 0.5) / geometry.rays_per_bin as f64 - 0.5;
        let s = s_center + frac * geometry.bin_spacing;
        let origin = [s * cos_phi, s * sin_phi];
        trace_ray(grid, origin, dir, |ix, iy, len| {
            let j = (ix + nx * iy) as u32;
            if acc[j as usize] == 0.0 {
                touched.push(j);
            }
            acc[j as usize] += weight * len;
        });
    }
    touched.sort_unstable();
    touched
        .into_iter()
        .filter_map(|j| {
            let w = acc[j as usize];
            (w > 0.0).then_some((j, w))
        })
        .collect()
}

/// Incremental Siddon traversal of the 2D pixel grid.
///
/// `origin` and unit `dir` are in mm with the grid centred on the origin;
/// `emit(ix, iy, length)` is called once per crossed pixel with the chord
/// length in mm.
fn trace_ray<F: FnMut(usize, usize, f64)>(
    grid: &ImageGrid,
    origin: [f64; 2],
    dir: [f64; 2],
    mut emit: F,
) {
    let v = grid.voxel_size;
    let half = [grid.nx as f64 * v / 2.0, grid.ny as f64 * v / 2.0];
    let n = [grid.nx as isize, grid.ny as isize];

    // Clip the infinite line to the grid bounding box.
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis].abs() < 1e-14 {
            if origin[axis] <= -half[axis] || origin[axis] >= half[axis] {
                return;
            }
        } else {
            let t1 = (-half[axis] - origin[axis]) / dir[axis];
            let t2 = (half[axis] - origin[axis]) / dir[axis];
            t_lo = t_lo.max(t1.min(t2));
            t_hi = t_hi.min(t1.max(t2));
        }
    }
    if t_lo >= t_hi {
        return;
    }

    // Entry pixel, clamped to handle rays entering exactly on a boundary.
    let mut idx = [0isize; 2];
    for axis in 0..2 {
        let p = origin[axis] + t_lo * dir[axis];
        let f = ((p + half[axis]) / v).floor() as isize;
        idx[axis] = f.clamp(0, n[axis] - 1);
    }

    // Distance to the next pixel boundary along each axis.
    let mut t_next = [f64::INFINITY; 2];
    let mut step = [0isize; 2];
    for axis in 0..2 {
        if dir[axis].abs() >= 1e-14 {
            step[axis] = if dir[axis] > 0.0 { 1 } else { -1 };
            let boundary = if dir[axis] > 0.0 {
                -half[axis] + (idx[axis] + 1) as f64 * v
            } else {
                -half[axis] + idx[axis] as f64 * v
            };
            t_next[axis] = (boundary - origin[axis]) / dir[axis];
        }
    }

    let mut t_cur = t_lo;
    loop {
        let axis = if t_next[0] <= t_next[1] { 0 } else { 1 };
        let t_exit = t_next[axis].min(t_hi);
        let len = t_exit - t_cur;
        if len > 0.0 {
            emit(idx[0] as usize, idx[1] as usize, len);
        }
        if t_next[axis] >= t_hi {
            return;
        }
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= n[axis] {
            return;
        }
        t_cur = t_next[axis];
        let boundary = if step[axis] > 0 {
            -half[axis] + (idx[axis] + 1) as f64 * v
        } else {
            -half[axis] + idx[axis] as f64 * v
        };
        t_next[axis] = (boundary - origin[axis]) / dir[axis];
    }
}
