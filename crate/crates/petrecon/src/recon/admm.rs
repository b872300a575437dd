//! Network-constrained reconstruction: the image is tied to the output of
//! a trained denoising network through an equality constraint, and the
//! split problem is solved with alternating updates.
//!
//! Per outer iteration: an EM step builds the likelihood surrogate, a
//! cancellation-free quadratic root updates the image, accelerated
//! gradient descent with backtracking pulls the network output toward the
//! image, and a scaled dual ascent step closes the loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{volume_forward, volume_forward_cached, volume_vjp_input, NetworkWeights};
use crate::projector::SystemMatrix;
use crate::recon::classic::{em_step, mlem, poisson_loglik, ReconConfig};
use crate::sinogram::{MeanComponents, Sinogram};
use crate::volume::{ActivityVolume, ImageGrid};

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    /// Penalty weight coupling the image to the network output. `None`
    /// picks `0.1 * median(sensitivity) / median(initial image)`.
    pub rho: Option<f64>,
    pub max_iterations: usize,
    /// Accelerated gradient steps per outer iteration.
    pub sub_iterations: usize,
    /// Starting gradient step size, halved on backtracking rejections.
    pub initial_step: f64,
    /// Multiplier applied to the step on each rejection; in (0, 1).
    pub shrink: f64,
    /// MLEM iterations that produce the starting image.
    pub init_mlem_iterations: usize,
    /// Outer iterations whose network outputs are kept.
    pub snapshots: Vec<usize>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: None,
            max_iterations: 10,
            sub_iterations: 5,
            initial_step: 1.0,
            shrink: 0.5,
            init_mlem_iterations: 30,
            snapshots: vec![1, 2, 4, 6, 8, 10],
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(Error::Config(format!(
                    "recon.admm.rho must be positive: got {rho}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("recon.admm.max_iterations must be positive".into()));
        }
        if self.sub_iterations == 0 {
            return Err(Error::Config("recon.admm.sub_iterations must be positive".into()));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::Config(format!(
                "recon.admm.initial_step must be positive: got {}",
                self.initial_step
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!(
                "recon.admm.shrink must lie in (0, 1): got {}",
                self.shrink
            )));
        }
        if self.init_mlem_iterations == 0 {
            return Err(Error::Config(
                "recon.admm.init_mlem_iterations must be positive".into(),
            ));
        }
        for &s in &self.snapshots {
            if s == 0 || s > self.max_iterations {
                return Err(Error::Config(format!(
                    "snapshot iteration {s} outside 1..={}",
                    self.max_iterations
                )));
            }
        }
        Ok(())
    }
}

/// Per-outer-iteration progress record.
#[derive(Debug, Clone, Copy)]
pub struct AdmmDiagnostics {
    pub iter: usize,
    /// Data log-likelihood of the image update.
    pub loglik: f64,
    /// `||x - f(alpha)|| / ||x||` after the dual update.
    pub residual: f64,
    /// Final value of `0.5 ||f(alpha) - z||^2` for this iteration.
    pub alpha_obj: f64,
    /// Step size in effect when the inner solver finished.
    pub step: f64,
}

/// Solver output.
#[derive(Debug, Clone)]
pub struct AdmmResult {
    /// Network output at the last iteration, clamped non-negative.
    pub volume: ActivityVolume,
    pub snapshots: Vec<(usize, ActivityVolume)>,
    pub diagnostics: Vec<AdmmDiagnostics>,
    /// Inner objective trace per outer iteration (entry value followed by
    /// each accepted step); non-increasing by construction.
    pub alpha_objectives: Vec<Vec<f64>>,
    /// Penalty weight actually used.
    pub rho: f64,
}

/// Nonnegative maximizer of `p (x_em ln x - x) - (rho/2)(x - c)^2`, the
/// root of `rho x^2 + (p - rho c) x - p x_em = 0`, evaluated without
/// subtractive cancellation.
pub fn x_update(p: f64, rho: f64, x_em: f64, c: f64) -> f64 {
    debug_assert!(rho > 0.0 && p >= 0.0 && x_em >= 0.0);
    let b = c - p / rho;
    let t = 4.0 * x_em * p / rho;
    if t == 0.0 {
        return b.max(0.0);
    }
    let d = (b * b + t).sqrt();
    if b > 0.0 {
        0.5 * (b + d)
    } else {
        0.5 * t / (d - b)
    }
}

fn squared_distance(a: &ActivityVolume, b: &ActivityVolume) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Outcome of the inner network-input fit.
pub struct AlphaFit {
    pub alpha: ActivityVolume,
    /// `f(alpha)` for the returned input, reused by the caller.
    pub output: ActivityVolume,
    /// Objective trace: entry value, then one value per accepted step.
    pub objectives: Vec<f64>,
    /// Step size in effect at exit, the warm start for the next call.
    pub step: f64,
}

/// Minimize `0.5 ||f(alpha) - z||^2` over the network input with
/// accelerated gradient descent. Rejected candidates shrink the step and
/// restart the momentum; the objective never increases. `output_entry`
/// must equal `f(alpha)` for the entry input.
pub fn alpha_subproblem(
    net: &NetworkWeights,
    alpha: &ActivityVolume,
    output_entry: &ActivityVolume,
    z: &ActivityVolume,
    sub_iterations: usize,
    entry_step: f64,
    shrink: f64,
    min_step: f64,
) -> Result<AlphaFit> {
    let mut alpha = alpha.clone();
    let mut output = output_entry.clone();
    let mut obj = 0.5 * squared_distance(&output, z);
    let mut objectives = vec![obj];
    let mut step = entry_step;
    let mut t = 1.0f64;
    let mut theta = alpha.clone();
    // f(theta) with caches; at entry theta == alpha so the cached pass is
    // the only recomputation of the entry point.
    let mut fwd = volume_forward_cached(net, &theta)?;

    'outer: for _ in 0..sub_iterations {
        let mut cotangent = fwd.output.clone();
        for (g, zv) in cotangent.values.iter_mut().zip(&z.values) {
            *g -= zv;
        }
        let mut grad = volume_vjp_input(net, &fwd, &cotangent)?;
        loop {
            let mut cand = theta.clone();
            for (c, g) in cand.values.iter_mut().zip(&grad.values) {
                *c -= step * g;
            }
            let cand_out = volume_forward(net, &cand)?;
            let cand_obj = 0.5 * squared_distance(&cand_out, z);
            if cand_obj <= obj {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let coef = (t - 1.0) / t_next;
                let mut next_theta = cand.clone();
                for (th, (cv, av)) in next_theta
                    .values
                    .iter_mut()
                    .zip(cand.values.iter().zip(&alpha.values))
                {
                    *th = cv + coef * (cv - av);
                }
                alpha = cand;
                output = cand_out;
                obj = cand_obj;
                objectives.push(obj);
                t = t_next;
                theta = next_theta;
                fwd = volume_forward_cached(net, &theta)?;
                break;
            }
            step *= shrink;
            if step < min_step {
                // No descent direction at this resolution: the entry
                // point is already (numerically) stationary.
                break 'outer;
            }
            t = 1.0;
            theta = alpha.clone();
            fwd = volume_forward_cached(net, &theta)?;
            let mut ct = fwd.output.clone();
            for (g, zv) in ct.values.iter_mut().zip(&z.values) {
                *g -= zv;
            }
            grad = volume_vjp_input(net, &fwd, &ct)?;
        }
    }
    Ok(AlphaFit {
        alpha,
        output,
        objectives,
        step,
    })
}

fn median_positive(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.filter(|x| *x > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(v[v.len() / 2])
}

/// Alternating reconstruction with the image constrained to the output of
/// `net`.
pub fn reconstruct_admm(
    matrix: &SystemMatrix,
    counts: &Sinogram,
    means: &MeanComponents,
    grid: &ImageGrid,
    net: &NetworkWeights,
    cfg: &AdmmConfig,
) -> Result<AdmmResult> {
    cfg.validate()?;
    let init = mlem(
        matrix,
        counts,
        means,
        grid,
        &ReconConfig {
            iterations: cfg.init_mlem_iterations,
            snapshots: vec![],
        },
    )?;
    let x_init = init.volume;

    let rho = match cfg.rho {
        Some(r) => r,
        None => {
            let med_p = median_positive(matrix.sensitivity.iter().copied()).ok_or_else(|| {
                Error::Numerical("system matrix has no positive sensitivity".into())
            })?;
            let med_x = median_positive(x_init.values.iter().copied()).ok_or_else(|| {
                Error::Numerical("starting image is identically zero; cannot scale rho".into())
            })?;
            0.1 * med_p / med_x
        }
    };

    let mut x = x_init.clone();
    let mut alpha = x_init;
    let mut f_alpha = volume_forward(net, &alpha)?;
    let mut mu = ActivityVolume::zeros(*grid);
    let mut step = cfg.initial_step;
    let min_step = 1e-14 * cfg.initial_step;

    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::with_capacity(cfg.max_iterations);
    let mut alpha_objectives = Vec::with_capacity(cfg.max_iterations);

    let slice_len = grid.nx * grid.ny;
    for it in 1..=cfg.max_iterations {
        let em = em_step(matrix, counts, means, &x)?;
        for j in 0..x.values.len() {
            let c = f_alpha.values[j] - mu.values[j];
            x.values[j] = x_update(matrix.sensitivity[j % slice_len], rho, em.values[j], c);
        }
        let loglik = poisson_loglik(counts, matrix, &x, means)?;

        let mut z = x.clone();
        for (zv, m) in z.values.iter_mut().zip(&mu.values) {
            *zv += m;
        }
        let fit = alpha_subproblem(
            net,
            &alpha,
            &f_alpha,
            &z,
            cfg.sub_iterations,
            step,
            cfg.shrink,
            min_step,
        )?;
        alpha = fit.alpha;
        f_alpha = fit.output;
        step = fit.step;
        let alpha_obj = *fit.objectives.last().expect("trace never empty");
        alpha_objectives.push(fit.objectives);

        let mut resid_sq = 0.0;
        let mut x_sq = 0.0;
        for j in 0..x.values.len() {
            let d = x.values[j] - f_alpha.values[j];
            mu.values[j] += d;
            resid_sq += d * d;
            x_sq += x.values[j] * x.values[j];
        }
        let residual = if x_sq > 0.0 {
            (resid_sq / x_sq).sqrt()
        } else {
            resid_sq.sqrt()
        };
        diagnostics.push(AdmmDiagnostics {
            iter: it,
            loglik,
            residual,
            alpha_obj,
            step,
        });
        if cfg.snapshots.contains(&it) {
            let mut snap = f_alpha.clone();
            snap.clamp_non_negative();
            snapshots.push((it, snap));
        }
    }

    let mut volume = f_alpha;
    volume.clamp_non_negative();
    Ok(AdmmResult {
        volume,
        snapshots,
        diagnostics,
        alpha_objectives,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkConfig;
    use crate::projector::ScannerGeometry;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn identity_net() -> NetworkWeights {
        NetworkWeights::zeros(&NetworkConfig {
            in_channels: 3,
            channels: vec![4, 8],
            kernel: 3,
        })
        .unwrap()
    }

    fn random_net(label: &str) -> NetworkWeights {
        let mut rng = derive_rng(33, label);
        NetworkWeights::init_he(
            &NetworkConfig {
                in_channels: 3,
                channels: vec![4, 8],
                kernel: 3,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn x_update_hand_cases() {
        // p = 1, rho = 2, x_em = 4, c = 0: root of 2x^2 + x - 4 = 0.
        let expect = (-1.0 + 33f64.sqrt()) / 4.0;
        assert!((x_update(1.0, 2.0, 4.0, 0.0) - expect).abs() < 1e-12);
        // p = 1, rho = 1, x_em = 1, c = 1: x^2 - 1 = 0 -> 1.
        assert!((x_update(1.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
        // Dead voxel (p = 0) reduces to the clamped quadratic center.
        assert_eq!(x_update(0.0, 1.0, 0.0, 2.5), 2.5);
        assert_eq!(x_update(0.0, 1.0, 0.0, -2.5), 0.0);
        // x_em = 0 with p > 0 still has the exact root.
        let x = x_update(2.0, 1.0, 0.0, 5.0);
        assert!((x - 3.0).abs() < 1e-12, "roots of x^2 - 3x = 0 -> 3");
    }

    #[test]
    fn x_update_zeroes_derivative_and_maximizes() {
        let mut rng = derive_rng(31, "xupdate");
        for _ in 0..1000 {
            let p = 10f64.powf(rng.gen_range(-2.0..2.0));
            let rho = 10f64.powf(rng.gen_range(-3.0..3.0));
            let em = 10f64.powf(rng.gen_range(-3.0..3.0));
            let c = rng.gen_range(-5.0..5.0) * 10f64.powf(rng.gen_range(-2.0..2.0));
            let x = x_update(p, rho, em, c);
            assert!(x > 0.0, "positive p and x_em force an interior root");
            // The surrogate derivative p(em/x - 1) - rho(x - c) vanishes.
            let deriv = p * (em / x - 1.0) - rho * (x - c);
            let scale = p * em / x + p + rho * (x + c.abs());
            assert!(
                deriv.abs() <= 1e-10 * scale,
                "p={p} rho={rho} em={em} c={c}: derivative {deriv}"
            );
            // Golden-section search over a bracket agrees.
            let golden = golden_max(p, rho, em, c);
            assert!(
                (x - golden).abs() <= 1e-8 * x.max(1.0),
                "p={p} rho={rho} em={em} c={c}: root {x} vs search {golden}"
            );
        }
    }

    /// Golden-section maximization of `p(em ln x - x) - rho/2 (x - c)^2`.
    /// Point comparisons use the objective difference in closed form, so
    /// the bracket keeps shrinking below the noise floor that plain
    /// subtraction of two near-equal objective values would hit.
    fn golden_max(p: f64, rho: f64, em: f64, c: f64, ) -> f64 {
        let diff = |u: f64, v: f64| {
            let d = u - v;
            p * em * (d / v).ln_1p() - d * (p + 0.5 * rho * (u + v - 2.0 * c))
        };
        let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
        // The maximizer is interior: the objective tends to -inf at 0 and
        // decreases past max(em, c).
        let mut a = 1e-300;
        let mut b = em + c.max(0.0) + 1.0;
        for _ in 0..500 {
            if b - a <= 1e-13 * b.max(1.0) {
                break;
            }
            let lo = b - inv_phi * (b - a);
            let hi = a + inv_phi * (b - a);
            if diff(lo, hi) > 0.0 {
                b = hi;
            } else {
                a = lo;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn identity_network_inner_solver_lands_on_target() {
        // With f = identity and unit step, one gradient step reaches z and
        // the objective drops to (numerical) zero.
        let net = identity_net();
        let grid = ImageGrid {
            nx: 8,
            ny: 8,
            nz: 3,
            voxel_size: 4.0,
        };
        let mut rng = derive_rng(32, "alpha-exact");
        let alpha = ActivityVolume {
            grid,
            values: (0..grid.len()).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        let z = ActivityVolume {
            grid,
            values: (0..grid.len()).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        let entry = volume_forward(&net, &alpha).unwrap();
        assert_eq!(entry.values, alpha.values);
        let fit = alpha_subproblem(&net, &alpha, &entry, &z, 5, 1.0, 0.5, 1e-14).unwrap();
        let scale: f64 = z.values.iter().map(|v| v * v).sum();
        assert!(
            *fit.objectives.last().unwrap() <= 1e-24 * scale,
            "final objective {} not annihilated",
            fit.objectives.last().unwrap()
        );
        assert!(fit.alpha.max_abs_diff(&z) <= 1e-12);
        assert_eq!(fit.step, 1.0, "unit step never rejected");
    }

    #[test]
    fn inner_objective_never_increases() {
        // A random network forces real backtracking; the accepted trace
        // must stay non-increasing and the entry value never worsens.
        let net = random_net("alpha-mono");
        let mut rng = derive_rng(33, "alpha-mono-data");
        let grid = ImageGrid {
            nx: 8,
            ny: 8,
            nz: 3,
            voxel_size: 4.0,
        };
        let alpha = ActivityVolume {
            grid,
            values: (0..grid.len()).map(|_| rng.gen_range(0.0..2.0)).collect(),
        };
        let z = ActivityVolume {
            grid,
            values: (0..grid.len()).map(|_| rng.gen_range(0.0..2.0)).collect(),
        };
        let entry = volume_forward(&net, &alpha).unwrap();
        let fit = alpha_subproblem(&net, &alpha, &entry, &z, 6, 8.0, 0.5, 1e-14).unwrap();
        assert!(fit.objectives.len() >= 2, "no step ever accepted");
        for w in fit.objectives.windows(2) {
            assert!(w[1] <= w[0], "objective rose: {} -> {}", w[0], w[1]);
        }
        let out = volume_forward(&net, &fit.alpha).unwrap();
        assert_eq!(out.values, fit.output.values, "returned output is stale");
    }

    fn small_scan() -> (ImageGrid, SystemMatrix, Sinogram, MeanComponents) {
        let grid = ImageGrid {
            nx: 12,
            ny: 12,
            nz: 3,
            voxel_size: 4.0,
        };
        let geom = ScannerGeometry {
            n_angles: 18,
            n_bins: 18,
            bin_spacing: 4.0,
            rays_per_bin: 1,
        };
        let m = SystemMatrix::build(&grid, &geom).unwrap();
        let mut truth = ActivityVolume::zeros(grid);
        for iz in 0..3 {
            for iy in 2..10 {
                for ix in 2..10 {
                    let dx = ix as f64 - 5.5;
                    let dy = iy as f64 - 5.5;
                    if dx * dx + dy * dy <= 16.0 {
                        truth.values[grid.index(ix, iy, iz)] = 1.0 + 0.5 * (iz as f64);
                    }
                }
            }
        }
        let y = m.forward_project(&truth).unwrap();
        let means = MeanComponents::zeros(y.n_slices, y.n_angles, y.n_bins);
        (grid, m, y, means)
    }

    #[test]
    fn identity_network_tracks_mlem_on_noise_free_data() {
        // f = identity makes the constraint x = f(alpha) inert, so the
        // solver should follow the likelihood like MLEM does.
        let (grid, m, y, means) = small_scan();
        let net = identity_net();
        let cfg = AdmmConfig {
            max_iterations: 50,
            init_mlem_iterations: 30,
            snapshots: vec![],
            ..Default::default()
        };
        let res = reconstruct_admm(&m, &y, &means, &grid, &net, &cfg).unwrap();
        let mlem_ref = mlem(
            &m,
            &y,
            &means,
            &grid,
            &ReconConfig {
                iterations: 80,
                snapshots: vec![],
            },
        )
        .unwrap();
        let norm: f64 = mlem_ref.volume.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = res
            .volume
            .values
            .iter()
            .zip(&mlem_ref.volume.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            diff <= 0.01 * norm,
            "relative gap {} exceeds 1%",
            diff / norm
        );
        // The identity inner solve closes the constraint gap exactly, so
        // the residual is zero from the first iteration on.
        for d in &res.diagnostics {
            assert!(d.residual <= 1e-12, "iter {}: residual {}", d.iter, d.residual);
        }
    }

    #[test]
    fn dual_variable_accumulates_constraint_gap() {
        // One outer iteration with an identity network: after the inner
        // solve f(alpha) = z = x + mu, so the new dual is mu + x - z = 0.
        let (grid, m, y, means) = small_scan();
        let net = identity_net();
        let cfg = AdmmConfig {
            max_iterations: 1,
            init_mlem_iterations: 5,
            snapshots: vec![1],
            ..Default::default()
        };
        let res = reconstruct_admm(&m, &y, &means, &grid, &net, &cfg).unwrap();
        assert!(
            res.diagnostics[0].residual <= 1e-12,
            "identity inner solve should close the gap, got {}",
            res.diagnostics[0].residual
        );
        assert_eq!(res.snapshots.len(), 1);
        assert_eq!(res.snapshots[0].0, 1);
        assert_eq!(res.snapshots[0].1.values, res.volume.values);
    }

    #[test]
    fn run_is_deterministic() {
        let (grid, m, y, means) = small_scan();
        let net = random_net("admm-det");
        let cfg = AdmmConfig {
            max_iterations: 3,
            init_mlem_iterations: 5,
            snapshots: vec![3],
            ..Default::default()
        };
        let a = reconstruct_admm(&m, &y, &means, &grid, &net, &cfg).unwrap();
        let b = reconstruct_admm(&m, &y, &means, &grid, &net, &cfg).unwrap();
        assert_eq!(a.volume.values, b.volume.values);
        assert_eq!(a.rho, b.rho);
        for (da, db) in a.diagnostics.iter().zip(&b.diagnostics) {
            assert_eq!(da.loglik, db.loglik);
            assert_eq!(da.residual, db.residual);
            assert_eq!(da.alpha_obj, db.alpha_obj);
        }
    }

    #[test]
    fn auto_rho_is_scale_invariant_in_spirit() {
        // Doubling the counts roughly doubles both the image scale and the
        // data curvature; the auto rho must stay finite and positive.
        let (grid, m, y, means) = small_scan();
        let net = identity_net();
        let cfg = AdmmConfig {
            max_iterations: 1,
            init_mlem_iterations: 3,
            snapshots: vec![],
            ..Default::default()
        };
        let r1 = reconstruct_admm(&m, &y, &means, &grid, &net, &cfg).unwrap();
        assert!(r1.rho > 0.0 && r1.rho.is_finite());
        let y2 = Sinogram {
            n_slices: y.n_slices,
            n_angles: y.n_angles,
            n_bins: y.n_bins,
            values: y.values.iter().map(|v| v * 2.0).collect(),
        };
        let r2 = reconstruct_admm(&m, &y2, &means, &grid, &net, &cfg).unwrap();
        assert!(
            (r2.rho - 0.5 * r1.rho).abs() <= 1e-9 * r1.rho,
            "rho should halve when the image scale doubles: {} vs {}",
            r2.rho,
            r1.rho
        );
    }

    #[test]
    fn config_validation() {
        assert!(AdmmConfig::default().validate().is_ok());
        assert!(AdmmConfig {
            rho: Some(-1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdmmConfig {
            shrink: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdmmConfig {
            snapshots: vec![11],
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
