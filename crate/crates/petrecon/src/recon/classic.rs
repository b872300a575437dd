//! Expectation-maximization reconstruction: Poisson log-likelihood, MLEM,
//! the fair-penalty MAP-EM variant, and Gaussian post-filtering.
//!
//! The MAP-EM update majorizes the fair penalty with its Huber-type
//! quadratic (curvature `phi'(t)/t`, which touches the penalty at the
//! expansion point) and separates pairwise terms across voxels, so each
//! iteration solves an independent per-voxel quadratic and the penalized
//! objective is monotone by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::SystemMatrix;
use crate::sinogram::{MeanComponents, Sinogram};
use crate::volume::{ActivityVolume, ImageGrid};

/// Iteration schedule for MLEM-style loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub iterations: usize,
    /// Iterations whose images are kept alongside the final one.
    pub snapshots: Vec<usize>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            iterations: 60,
            snapshots: vec![20, 40, 60],
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("recon iterations must be positive".into()));
        }
        for &s in &self.snapshots {
            if s == 0 || s > self.iterations {
                return Err(Error::Config(format!(
                    "snapshot iteration {s} outside 1..={}",
                    self.iterations
                )));
            }
        }
        Ok(())
    }
}

/// MLEM output: final image, requested snapshots, per-iteration data
/// log-likelihood.
#[derive(Debug, Clone)]
pub struct MlemResult {
    pub volume: ActivityVolume,
    pub snapshots: Vec<(usize, ActivityVolume)>,
    pub loglik: Vec<f64>,
}

/// Poisson log-likelihood `sum_i y_i ln(ybar_i) - ybar_i` (constant terms
/// dropped) for `ybar = Px + s + r`. Returns negative infinity when some
/// bin has counts but zero mean.
pub fn poisson_loglik(
    counts: &Sinogram,
    matrix: &SystemMatrix,
    x: &ActivityVolume,
    means: &MeanComponents,
) -> Result<f64> {
    let proj = matrix.forward_project(x)?;
    check_shapes(counts, &proj, means)?;
    Ok(loglik_from_means(counts, &proj, means))
}

/// Log-likelihood with the projection already at hand.
fn loglik_from_means(counts: &Sinogram, proj: &Sinogram, means: &MeanComponents) -> f64 {
    let mut total = 0.0;
    for i in 0..counts.values.len() {
        let y = counts.values[i];
        let ybar = proj.values[i] + means.scatter.values[i] + means.randoms.values[i];
        if ybar > 0.0 {
            total += if y > 0.0 { y * ybar.ln() - ybar } else { -ybar };
        } else if y > 0.0 {
            return f64::NEG_INFINITY;
        } else {
            total -= ybar;
        }
    }
    total
}

fn check_shapes(counts: &Sinogram, proj: &Sinogram, means: &MeanComponents) -> Result<()> {
    if !counts.same_shape(proj) || !means.scatter.same_shape(proj) || !means.randoms.same_shape(proj)
    {
        return Err(Error::Dimension(
            "counts, projection, and background means must share a shape".into(),
        ));
    }
    Ok(())
}

/// One multiplicative EM update. Voxels with zero sensitivity are frozen
/// at zero; zero-activity voxels are absorbing (standard EM behavior).
pub fn em_step(
    matrix: &SystemMatrix,
    counts: &Sinogram,
    means: &MeanComponents,
    x: &ActivityVolume,
) -> Result<ActivityVolume> {
    let proj = matrix.forward_project(x)?;
    check_shapes(counts, &proj, means)?;
    let grid = x.grid;
    let mut out = ActivityVolume::zeros(grid);
    let mut ratio = vec![0.0; proj.slice_len()];
    for iz in 0..grid.nz {
        let y = counts.slice(iz);
        let p = proj.slice(iz);
        let s = means.scatter.slice(iz);
        let r = means.randoms.slice(iz);
        for i in 0..ratio.len() {
            let ybar = p[i] + s[i] + r[i];
            ratio[i] = if ybar > 0.0 {
                y[i] / ybar
            } else if y[i] > 0.0 {
                return Err(Error::Numerical(format!(
                    "bin with {} counts has zero expected mean (slice {iz}, bin {i})",
                    y[i]
                )));
            } else {
                0.0
            };
        }
        let mut back = vec![0.0; grid.nx * grid.ny];
        matrix.back_project_slice(&ratio, &mut back);
        let xin = x.slice(iz);
        let xout = out.slice_mut(iz);
        for j in 0..xout.len() {
            let p_j = matrix.sensitivity[j];
            xout[j] = if p_j > 0.0 { xin[j] * back[j] / p_j } else { 0.0 };
        }
    }
    Ok(out)
}

/// Scale-matched uniform starting image: total forward counts equal the
/// measured total when backgrounds vanish.
pub fn uniform_init(matrix: &SystemMatrix, counts: &Sinogram, grid: &ImageGrid) -> ActivityVolume {
    let p_total: f64 = matrix.sensitivity.iter().sum::<f64>() * grid.nz as f64;
    let value = if p_total > 0.0 { counts.total() / p_total } else { 0.0 };
    ActivityVolume::constant(*grid, value.max(f64::MIN_POSITIVE))
}

/// MLEM from the uniform starting image.
pub fn mlem(
    matrix: &SystemMatrix,
    counts: &Sinogram,
    means: &MeanComponents,
    grid: &ImageGrid,
    cfg: &ReconConfig,
) -> Result<MlemResult> {
    let x0 = uniform_init(matrix, counts, grid);
    mlem_from(matrix, counts, means, &x0, cfg)
}

/// MLEM from a caller-supplied starting image.
pub fn mlem_from(
    matrix: &SystemMatrix,
    counts: &Sinogram,
    means: &MeanComponents,
    x0: &ActivityVolume,
    cfg: &ReconConfig,
) -> Result<MlemResult> {
    cfg.validate()?;
    let mut x = x0.clone();
    let mut snapshots = Vec::new();
    let mut loglik = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        x = em_step(matrix, counts, means, &x)?;
        loglik.push(poisson_loglik(counts, matrix, &x, means)?);
        if cfg.snapshots.contains(&it) {
            snapshots.push((it, x.clone()));
        }
    }
    Ok(MlemResult {
        volume: x,
        snapshots,
        loglik,
    })
}

/// Fair penalty value and derivative at `t`:
/// `phi(t) = sigma * (|t|/sigma - ln(1 + |t|/sigma))`, `phi'(t) = t / (sigma + |t|)`.
pub fn fair_penalty(t: f64, sigma: f64) -> (f64, f64) {
    debug_assert!(sigma > 0.0);
    let a = t.abs() / sigma;
    let value = sigma * (a - a.ln_1p());
    let deriv = t / (sigma + t.abs());
    (value, deriv)
}

/// Sum of the fair penalty over unordered in-plane 4-neighbor pairs.
pub fn fair_penalty_sum(x: &ActivityVolume, sigma: f64) -> f64 {
    let g = x.grid;
    let mut total = 0.0;
    for iz in 0..g.nz {
        let s = x.slice(iz);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let v = s[iy * g.nx + ix];
                if ix + 1 < g.nx {
                    total += fair_penalty(v - s[iy * g.nx + ix + 1], sigma).0;
                }
                if iy + 1 < g.ny {
                    total += fair_penalty(v - s[(iy + 1) * g.nx + ix], sigma).0;
                }
            }
        }
    }
    total
}

/// Penalized-reconstruction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapemConfig {
    pub iterations: usize,
    /// Regularization weight; zero reduces the method to MLEM.
    pub beta: f64,
    /// Plain MLEM iterations run first; the penalty scale is anchored to
    /// the mean intensity of the warmed-up image.
    pub warmup_iterations: usize,
    /// `sigma = sigma_factor * mean(warmup image)`.
    pub sigma_factor: f64,
}

impl Default for MapemConfig {
    fn default() -> Self {
        MapemConfig {
            iterations: 60,
            beta: 1.0,
            warmup_iterations: 10,
            sigma_factor: 1e-5,
        }
    }
}

impl MapemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("recon.mapem.iterations must be positive".into()));
        }
        if self.warmup_iterations == 0 {
            return Err(Error::Config(
                "recon.mapem.warmup_iterations must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "recon.mapem.beta must be non-negative: got {}",
                self.beta
            )));
        }
        if !(self.sigma_factor > 0.0) {
            return Err(Error::Config(format!(
                "recon.mapem.sigma_factor must be positive: got {}",
                self.sigma_factor
            )));
        }
        Ok(())
    }
}

/// MAP-EM output with the per-iteration penalized objective.
#[derive(Debug, Clone)]
pub struct MapemResult {
    pub volume: ActivityVolume,
    /// `loglik - beta * penalty` after each post-warmup iteration.
    pub objective: Vec<f64>,
    pub sigma: f64,
}

/// Fair-penalty MAP-EM: MLEM warmup, then monotone penalized updates.
pub fn mapem_fair(
    matrix: &SystemMatrix,
    counts: &Sinogram,
    means: &MeanComponents,
    grid: &ImageGrid,
    cfg: &MapemConfig,
) -> Result<MapemResult> {
    cfg.validate()?;
    let warm = mlem(
        matrix,
        counts,
        means,
        grid,
        &ReconConfig {
            iterations: cfg.warmup_iterations,
            snapshots: vec![],
        },
    )?;
    let mut x = warm.volume;
    let mean_intensity = x.total() / x.values.len() as f64;
    if !(mean_intensity > 0.0) {
        return Err(Error::Numerical(
            "warmup image has zero mean intensity; cannot anchor penalty scale".into(),
        ));
    }
    let sigma = cfg.sigma_factor * mean_intensity;

    let mut objective = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let em = em_step(matrix, counts, means, &x)?;
        if cfg.beta == 0.0 {
            x = em;
        } else {
            x = penalized_update(&x, &em, matrix, cfg.beta, sigma);
        }
        let ll = poisson_loglik(counts, matrix, &x, means)?;
        objective.push(ll - cfg.beta * fair_penalty_sum(&x, sigma));
    }
    Ok(MapemResult {
        volume: x,
        objective,
        sigma,
    })
}

/// Solve the separable per-voxel surrogate maximization
/// `p (x_em ln x - x) - sum_k (beta w_k / 4) (2x - x_j - x_k)^2`.
fn penalized_update(
    prev: &ActivityVolume,
    em: &ActivityVolume,
    matrix: &SystemMatrix,
    beta: f64,
    sigma: f64,
) -> ActivityVolume {
    let g = prev.grid;
    let mut out = ActivityVolume::zeros(g);
    for iz in 0..g.nz {
        let xp = prev.slice(iz);
        let xe = em.slice(iz);
        let xo = out.slice_mut(iz);
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let j = iy * g.nx + ix;
                let p_j = matrix.sensitivity[j];
                if p_j <= 0.0 {
                    xo[j] = 0.0;
                    continue;
                }
                let xj = xp[j];
                let mut a = 0.0;
                let mut b = 0.0;
                let mut add = |xk: f64| {
                    let w = 1.0 / (sigma + (xj - xk).abs());
                    a += 2.0 * beta * w;
                    b += beta * w * (xj + xk);
                };
                if ix > 0 {
                    add(xp[j - 1]);
                }
                if ix + 1 < g.nx {
                    add(xp[j + 1]);
                }
                if iy > 0 {
                    add(xp[j - g.nx]);
                }
                if iy + 1 < g.ny {
                    add(xp[j + g.nx]);
                }
                xo[j] = positive_quadratic_root(a, p_j - b, p_j * xe[j]);
            }
        }
    }
    out
}

/// Nonnegative root of `a x^2 + b x - c = 0` with `a > 0`, `c >= 0`,
/// evaluated in a cancellation-free form.
fn positive_quadratic_root(a: f64, b: f64, c: f64) -> f64 {
    debug_assert!(a > 0.0 && c >= 0.0);
    if c == 0.0 {
        return (-b / a).max(0.0);
    }
    let d = (b * b + 4.0 * a * c).sqrt();
    if b <= 0.0 {
        (d - b) / (2.0 * a)
    } else {
        2.0 * c / (d + b)
    }
}

/// Separable Gaussian smoothing with replicate borders;
/// `sigma_voxels = fwhm / (2.355 * voxel_size)`, kernel radius `ceil(4 sigma)`.
pub fn gaussian_postfilter(x: &ActivityVolume, fwhm_mm: f64) -> Result<ActivityVolume> {
    if !(fwhm_mm >= 0.0) || !fwhm_mm.is_finite() {
        return Err(Error::Config(format!(
            "gaussian fwhm must be non-negative: got {fwhm_mm}"
        )));
    }
    if fwhm_mm == 0.0 {
        return Ok(x.clone());
    }
    let g = x.grid;
    let sigma = fwhm_mm / (2.355 * g.voxel_size);
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= norm;
    }

    let dims = [g.nx, g.ny, g.nz];
    // Strides for x-fastest layout.
    let strides = [1usize, g.nx, g.nx * g.ny];
    let mut cur = x.values.clone();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis] as isize;
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i_b in 0..dims[ob] {
            for i_a in 0..dims[oa] {
                let base = (i_a * strides[oa] + i_b * strides[ob]) as isize;
                for i in 0..n {
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let src = (i + ki as isize - radius).clamp(0, n - 1);
                        acc += w * cur[(base + src * stride) as usize];
                    }
                    next[(base + i * stride) as usize] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(ActivityVolume { grid: g, values: cur })
}
