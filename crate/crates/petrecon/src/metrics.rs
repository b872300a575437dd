//! Lesion contrast recovery, background noise level, sweep curves, and
//! matched-noise comparisons over sets of reconstructed realizations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::volume::{ActivityVolume, LabelVolume};

/// Regions used by the evaluation metrics: lesion voxels with their true
/// uptake, and the background regions noise is measured in.
#[derive(Debug, Clone)]
pub struct RoiSpec {
    /// Flat voxel indices of all lesion voxels (their union).
    pub lesion_voxels: Vec<usize>,
    /// True lesion uptake the recovery ratio is taken against.
    pub a_true: f64,
    /// Flat voxel indices per background region.
    pub background_rois: Vec<Vec<usize>>,
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lesion_voxels.is_empty() {
            return Err(Error::Config("lesion voxel set is empty".into()));
        }
        if !(self.a_true > 0.0) {
            return Err(Error::Config(format!(
                "true lesion uptake must be positive: got {}",
                self.a_true
            )));
        }
        for (k, roi) in self.background_rois.iter().enumerate() {
            if roi.is_empty() {
                return Err(Error::Config(format!("background region {k} is empty")));
            }
            if roi.iter().any(|v| self.lesion_voxels.contains(v)) {
                return Err(Error::Config(format!(
                    "background region {k} overlaps a lesion"
                )));
            }
        }
        Ok(())
    }
}

fn mean_over(volume: &ActivityVolume, voxels: &[usize]) -> f64 {
    voxels.iter().map(|&j| volume.values[j]).sum::<f64>() / voxels.len() as f64
}

/// Per-realization lesion recovery ratios `mean(lesion) / a_true`.
pub fn contrast_recovery_per_realization(
    set: &[ActivityVolume],
    roi: &RoiSpec,
) -> Result<Vec<f64>> {
    roi.validate()?;
    if set.is_empty() {
        return Err(Error::Config("realization set is empty".into()));
    }
    Ok(set
        .iter()
        .map(|v| mean_over(v, &roi.lesion_voxels) / roi.a_true)
        .collect())
}

/// Mean lesion recovery over realizations.
pub fn contrast_recovery(set: &[ActivityVolume], roi: &RoiSpec) -> Result<f64> {
    let per = contrast_recovery_per_realization(set, roi)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Background noise level: for each region, the sample standard deviation
/// (over realizations, `R - 1` denominator) of the region mean, divided by
/// its average; regions are then averaged.
pub fn background_std(set: &[ActivityVolume], roi: &RoiSpec) -> Result<f64> {
    roi.validate()?;
    let r = set.len();
    if r < 2 {
        return Err(Error::Config(format!(
            "noise measurement needs at least 2 realizations, got {r}"
        )));
    }
    if roi.background_rois.is_empty() {
        return Err(Error::Config("no background regions".into()));
    }
    let mut total = 0.0;
    for (k, voxels) in roi.background_rois.iter().enumerate() {
        let means: Vec<f64> = set.iter().map(|v| mean_over(v, voxels)).collect();
        let avg = means.iter().sum::<f64>() / r as f64;
        if !(avg > 0.0) {
            return Err(Error::Numerical(format!(
                "background region {k} has non-positive mean {avg}"
            )));
        }
        let var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (r - 1) as f64;
        total += var.sqrt() / avg;
    }
    Ok(total / roi.background_rois.len() as f64)
}

/// Place `count` non-overlapping in-plane circular regions of radius
/// `radius_vox` whose voxels all carry the given tissue. Placement is
/// deterministic in `master_seed`.
pub fn place_background_rois(
    labels: &LabelVolume,
    tissue: &str,
    count: usize,
    radius_vox: f64,
    master_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Err(Error::Config("background region count must be positive".into()));
    }
    if !(radius_vox > 0.0) {
        return Err(Error::Config(format!(
            "background region radius must be positive: got {radius_vox}"
        )));
    }
    let g = labels.grid;
    let r = radius_vox.floor() as isize;
    let mut disc: Vec<(isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius_vox * radius_vox {
                disc.push((dx, dy));
            }
        }
    }
    let allowed: Vec<bool> = labels
        .labels
        .iter()
        .map(|l| labels.tissue_name(*l) == Some(tissue))
        .collect();
    let mut taken = vec![false; g.len()];
    let mut rois = Vec::with_capacity(count);
    let mut rng = derive_rng(master_seed, "roi-place");
    let mut attempts = 0usize;
    let budget = 20_000 * count;
    while rois.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "placed only {} of {count} background regions in '{tissue}' after {budget} draws",
                rois.len()
            )));
        }
        let ix = rng.gen_range(0..g.nx) as isize;
        let iy = rng.gen_range(0..g.ny) as isize;
        let iz = rng.gen_range(0..g.nz);
        let mut voxels = Vec::with_capacity(disc.len());
        let mut ok = true;
        for &(dx, dy) in &disc {
            let x = ix + dx;
            let y = iy + dy;
            if x < 0 || y < 0 || x >= g.nx as isize || y >= g.ny as isize {
                ok = false;
                break;
            }
            let j = g.index(x as usize, y as usize, iz);
            if !allowed[j] || taken[j] {
                ok = false;
                break;
            }
            voxels.push(j);
        }
        if ok {
            for &j in &voxels {
                taken[j] = true;
            }
            rois.push(voxels);
        }
    }
    Ok(rois)
}

/// One sweep entry of a method's noise/recovery trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub sweep_value: f64,
    pub std: f64,
    pub cr: f64,
}

/// A method's full sweep curve with the per-realization recovery values
/// needed for paired comparisons.
#[derive(Debug, Clone)]
pub struct MethodCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
    /// `cr_per_realization[i][r]`: recovery of realization `r` at point `i`.
    pub cr_per_realization: Vec<Vec<f64>>,
}

/// Recovery of a curve read off at a fixed noise level.
#[derive(Debug, Clone)]
pub struct MatchedCr {
    pub cr: f64,
    pub per_realization: Vec<f64>,
}

impl MethodCurve {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.cr_per_realization.len() {
            return Err(Error::Dimension(format!(
                "curve '{}' has {} points but {} recovery rows",
                self.method,
                self.points.len(),
                self.cr_per_realization.len()
            )));
        }
        if let Some(first) = self.cr_per_realization.first() {
            if self
                .cr_per_realization
                .iter()
                .any(|row| row.len() != first.len())
            {
                return Err(Error::Dimension(format!(
                    "curve '{}' has ragged recovery rows",
                    self.method
                )));
            }
        }
        Ok(())
    }

    /// Smallest and largest noise level on the curve.
    pub fn std_range(&self) -> Option<(f64, f64)> {
        let min = self.points.iter().map(|p| p.std).fold(f64::INFINITY, f64::min);
        let max = self
            .points
            .iter()
            .map(|p| p.std)
            .fold(f64::NEG_INFINITY, f64::max);
        (!self.points.is_empty()).then_some((min, max))
    }

    /// Linear interpolation of recovery at a target noise level, applied
    /// with the same weights to every realization. Uses the first segment
    /// (in sweep order) whose endpoints bracket the target; `None` when no
    /// segment does.
    pub fn cr_at_std(&self, target: f64) -> Option<MatchedCr> {
        if self.points.len() < 2 {
            let p = self.points.first()?;
            if p.std == target {
                return Some(MatchedCr {
                    cr: p.cr,
                    per_realization: self.cr_per_realization[0].clone(),
                });
            }
            return None;
        }
        for i in 0..self.points.len() - 1 {
            let a = &self.points[i];
            let b = &self.points[i + 1];
            if (a.std - target) * (b.std - target) <= 0.0 {
                let w = if b.std == a.std {
                    0.0
                } else {
                    (target - a.std) / (b.std - a.std)
                };
                let blend = |x: f64, y: f64| (1.0 - w) * x + w * y;
                let per: Vec<f64> = self.cr_per_realization[i]
                    .iter()
                    .zip(&self.cr_per_realization[i + 1])
                    .map(|(x, y)| blend(*x, *y))
                    .collect();
                return Some(MatchedCr {
                    cr: blend(a.cr, b.cr),
                    per_realization: per,
                });
            }
        }
        None
    }
}

/// Mean of the per-realization differences `a_r - b_r`.
pub fn paired_mean_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "paired comparison needs equal non-empty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64)
}

/// Elementwise difference of two reconstructions of the same scene with
/// and without an inserted lesion.
pub fn lesion_difference(
    with: &ActivityVolume,
    without: &ActivityVolume,
) -> Result<ActivityVolume> {
    if with.grid != without.grid {
        return Err(Error::Dimension(
            "lesion difference needs a common grid".into(),
        ));
    }
    Ok(ActivityVolume {
        grid: with.grid,
        values: with
            .values
            .iter()
            .zip(&without.values)
            .map(|(a, b)| a - b)
            .collect(),
    })
}
