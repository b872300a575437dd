//! Poisson acquisition model.
//!
//! The measured counts follow `y ~ Poisson(scale * Px + s + r)`. The global
//! scale is chosen so the expected true coincidences hit a per-slice count
//! target, and scatter `s` plus randoms `r` are uniform sinograms whose
//! total is `bf / (1 - bf)` times the total trues (so background makes up
//! the fraction `bf` of all expected events), split evenly between the two.
//!
//! Sampling uses one RNG stream per slice derived from `(seed, label,
//! slice)`, so results do not depend on scheduling and individual slices
//! can be regenerated in isolation. Every bin consumes a fixed number of
//! uniforms regardless of its mean, so two acquisitions that share a seed
//! and scale but differ in a few bins (for example with and without an
//! inserted lesion) produce identical counts in every unchanged bin.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::SystemMatrix;
use crate::rng::derive_rng_indexed;
use crate::sinogram::{MeanComponents, Sinogram};
use crate::volume::ActivityVolume;

/// Count-level settings of a simulated scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionParams {
    /// Expected true coincidences per slice at the high count level.
    pub target_true_counts: f64,
    /// Fraction of all expected events that are background (scatter plus
    /// randoms); must lie in `[0, 1)`.
    pub background_fraction: f64,
    /// Thinning ratio used to derive the low-count data set.
    pub thin_ratio: f64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        AcquisitionParams {
            target_true_counts: 2e5,
            background_fraction: 0.6,
            thin_ratio: 0.1,
        }
    }
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_true_counts > 0.0) || !self.target_true_counts.is_finite() {
            return Err(Error::Config(format!(
                "acquisition.target_true_counts must be positive: got {}",
                self.target_true_counts
            )));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::Config(format!(
                "acquisition.background_fraction must be in [0, 1): got {}",
                self.background_fraction
            )));
        }
        if !(self.thin_ratio > 0.0 && self.thin_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "acquisition.thin_ratio must be in (0, 1]: got {}",
                self.thin_ratio
            )));
        }
        Ok(())
    }
}

/// Everything produced by one simulated scan.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    /// Poisson counts (integer-valued).
    pub counts: Sinogram,
    /// Expected true coincidences `scale * Px`.
    pub trues_mean: Sinogram,
    /// Scatter and randoms mean sinograms.
    pub means: MeanComponents,
    /// Activity-to-counts scale applied to the volume.
    pub scale: f64,
}

/// Project `activity`, scale to the count target, add uniform background
/// and draw Poisson counts.
pub fn simulate_counts(
    matrix: &SystemMatrix,
    activity: &ActivityVolume,
    params: &AcquisitionParams,
    seed: u64,
    stream_label: &str,
) -> Result<SimulatedData> {
    params.validate()?;
    simulate_with_scale(matrix, activity, params, seed, stream_label, None, None)
}

/// Same as [`simulate_counts`] but with a caller-supplied activity scale,
/// used to acquire a modified phantom under identical scanner settings.
pub fn simulate_counts_scaled(
    matrix: &SystemMatrix,
    activity: &ActivityVolume,
    params: &AcquisitionParams,
    seed: u64,
    stream_label: &str,
    scale: f64,
) -> Result<SimulatedData> {
    params.validate()?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!(
            "activity scale must be positive and finite: got {scale}"
        )));
    }
    simulate_with_scale(matrix, activity, params, seed, stream_label, Some(scale), None)
}

/// Acquire `activity` under exactly the conditions of `reference`: same
/// activity scale, same background means, same noise streams. Bins whose
/// expected trues are unchanged then reproduce the reference counts
/// bit-for-bit, which is what the lesion-difference protocol relies on.
pub fn simulate_counts_matched(
    matrix: &SystemMatrix,
    activity: &ActivityVolume,
    params: &AcquisitionParams,
    seed: u64,
    stream_label: &str,
    reference: &SimulatedData,
) -> Result<SimulatedData> {
    params.validate()?;
    simulate_with_scale(
        matrix,
        activity,
        params,
        seed,
        stream_label,
        Some(reference.scale),
        Some(&reference.means),
    )
}

fn simulate_with_scale(
    matrix: &SystemMatrix,
    activity: &ActivityVolume,
    params: &AcquisitionParams,
    seed: u64,
    stream_label: &str,
    scale: Option<f64>,
    fixed_means: Option<&MeanComponents>,
) -> Result<SimulatedData> {
    if activity.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(
            "activity must be non-negative and finite".into(),
        ));
    }
    let mut trues = matrix.forward_project(activity)?;
    let raw_total = trues.total();
    if !(raw_total > 0.0) {
        return Err(Error::Config(
            "activity projects to zero counts; nothing to simulate".into(),
        ));
    }
    let n_slices = trues.n_slices;
    let target_total = params.target_true_counts * n_slices as f64;
    let scale = scale.unwrap_or(target_total / raw_total);
    for v in &mut trues.values {
        *v *= scale;
    }
    let trues_total = trues.total();

    let means = match fixed_means {
        Some(m) => {
            if !m.scatter.same_shape(&trues) || !m.randoms.same_shape(&trues) {
                return Err(Error::Dimension(
                    "reference background means do not match the sinogram shape".into(),
                ));
            }
            m.clone()
        }
        None => {
            let bf = params.background_fraction;
            let background_total = bf / (1.0 - bf) * trues_total;
            let per_bin = background_total / trues.values.len() as f64 / 2.0;
            let mut means = MeanComponents::zeros(n_slices, trues.n_angles, trues.n_bins);
            means.scatter.values.fill(per_bin);
            means.randoms.values.fill(per_bin);
            means
        }
    };

    let mut counts = Sinogram::zeros(n_slices, trues.n_angles, trues.n_bins);
    for iz in 0..n_slices {
        let mut rng = derive_rng_indexed(seed, stream_label, iz as u64);
        let t = trues.slice(iz);
        let s = means.scatter.slice(iz);
        let r = means.randoms.slice(iz);
        let out = counts.slice_mut(iz);
        for i in 0..out.len() {
            out[i] = sample_poisson(t[i] + s[i] + r[i], &mut rng)?;
        }
    }

    Ok(SimulatedData {
        counts,
        trues_mean: trues,
        means,
        scale,
    })
}

/// Sub-draws composing each Poisson sample; one uniform each.
const POISSON_SPLIT: usize = 16;

/// Draw `Poisson(lambda)` as the sum of [`POISSON_SPLIT`] independent
/// `Poisson(lambda / POISSON_SPLIT)` inverse-CDF draws. The draw count per
/// bin is constant, which keeps paired acquisitions stream-synchronized.
fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> Result<f64> {
    let sub = lambda / POISSON_SPLIT as f64;
    // exp(-sub) must stay a normal float for the CDF recursion.
    if !(0.0..=600.0).contains(&sub) || !sub.is_finite() {
        return Err(Error::Numerical(format!(
            "per-bin mean {lambda} outside the supported sampling range"
        )));
    }
    let mut total = 0.0;
    for _ in 0..POISSON_SPLIT {
        let u: f64 = rng.gen();
        total += poisson_quantile(sub, u);
    }
    Ok(total)
}

/// Smallest `k` with `CDF(k) >= u` for `Poisson(lambda)`.
fn poisson_quantile(lambda: f64, u: f64) -> f64 {
    let mut k = 0.0;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1.0;
        p *= lambda / k;
        cdf += p;
        // Rounding guard: the tail mass can fall below resolution for
        // u extremely close to 1; the quantile is then effectively k.
        if p < f64::MIN_POSITIVE && cdf < u {
            break;
        }
    }
    k
}

/// Binomial thinning: every recorded count is kept independently with
/// probability `ratio`. Thinning a Poisson measurement yields a Poisson
/// measurement with mean scaled by `ratio`.
pub fn thin_counts(counts: &Sinogram, ratio: f64, seed: u64, stream_label: &str) -> Result<Sinogram> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "thinning ratio must be in (0, 1]: got {ratio}"
        )));
    }
    let mut out = Sinogram::zeros(counts.n_slices, counts.n_angles, counts.n_bins);
    for iz in 0..counts.n_slices {
        let mut rng = derive_rng_indexed(seed, stream_label, iz as u64);
        let src = counts.slice(iz);
        let dst = out.slice_mut(iz);
        for i in 0..src.len() {
            let y = src[i];
            if y < 0.0 || y.fract() != 0.0 || y > u64::MAX as f64 {
                return Err(Error::Domain(format!(
                    "thinning requires integer-valued counts: got {y}"
                )));
            }
            let n = y as u64;
            dst[i] = if n == 0 {
                0.0
            } else if ratio == 1.0 {
                y
            } else {
                Binomial::new(n, ratio)
                    .map_err(|e| Error::Numerical(format!("binomial({n}, {ratio}): {e}")))?
                    .sample(&mut rng) as f64
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::ScannerGeometry;
    use crate::volume::ImageGrid;

    fn setup() -> (ImageGrid, SystemMatrix, ActivityVolume) {
        let grid = ImageGrid {
            nx: 16,
            ny: 16,
            nz: 2,
            voxel_size: 8.0,
        };
        let geom = ScannerGeometry {
            n_angles: 12,
            n_bins: 24,
            bin_spacing: 8.0,
            rays_per_bin: 1,
        };
        let m = SystemMatrix::build(&grid, &geom).unwrap();
        let mut act = ActivityVolume::zeros(grid);
        for iz in 0..2 {
            for iy in 4..12 {
                for ix in 4..12 {
                    act.values[grid.index(ix, iy, iz)] = 1.0 + (ix + iy) as f64 * 0.1;
                }
            }
        }
        (grid, m, act)
    }

    #[test]
    fn counts_are_integers_and_near_target() {
        let (_, m, act) = setup();
        let params = AcquisitionParams {
            target_true_counts: 5e4,
            background_fraction: 0.6,
            thin_ratio: 0.1,
        };
        let sim = simulate_counts(&m, &act, &params, 33, "test").unwrap();
        assert!(sim.counts.values.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        // Expected trues hit the target exactly by construction.
        assert!((sim.trues_mean.total() - 1e5).abs() < 1e-6);
        // Background split: s and r equal, total 1.5x trues at bf = 0.6.
        let s_total = sim.means.scatter.total();
        let r_total = sim.means.randoms.total();
        assert!((s_total - r_total).abs() < 1e-9);
        assert!(((s_total + r_total) - 1.5e5).abs() < 1e-6);
        // Realized counts within 3 standard errors of the mean.
        let mean_total = 2.5e5;
        let got = sim.counts.total();
        assert!(
            (got - mean_total).abs() < 3.0 * mean_total.sqrt(),
            "total {got} vs mean {mean_total}"
        );
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let (_, m, act) = setup();
        let params = AcquisitionParams::default();
        let a = simulate_counts(&m, &act, &params, 1, "x").unwrap();
        let b = simulate_counts(&m, &act, &params, 1, "x").unwrap();
        assert_eq!(a.counts, b.counts);
        let c = simulate_counts(&m, &act, &params, 2, "x").unwrap();
        assert_ne!(a.counts, c.counts);
        let d = simulate_counts(&m, &act, &params, 1, "y").unwrap();
        assert_ne!(a.counts, d.counts);
    }

    #[test]
    fn zero_activity_is_rejected() {
        let (grid, m, _) = setup();
        let act = ActivityVolume::zeros(grid);
        let err = simulate_counts(&m, &act, &AcquisitionParams::default(), 1, "x");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let (_, m, act) = setup();
        for bad in [
            AcquisitionParams {
                background_fraction: 1.0,
                ..Default::default()
            },
            AcquisitionParams {
                background_fraction: -0.1,
                ..Default::default()
            },
            AcquisitionParams {
                target_true_counts: 0.0,
                ..Default::default()
            },
            AcquisitionParams {
                thin_ratio: 0.0,
                ..Default::default()
            },
        ] {
            assert!(simulate_counts(&m, &act, &bad, 1, "x").is_err());
        }
    }

    #[test]
    fn supplied_scale_is_honoured() {
        let (_, m, act) = setup();
        let params = AcquisitionParams::default();
        let auto = simulate_counts(&m, &act, &params, 7, "x").unwrap();
        let forced =
            simulate_counts_scaled(&m, &act, &params, 7, "x", auto.scale * 0.5).unwrap();
        assert!((forced.trues_mean.total() - 0.5 * auto.trues_mean.total()).abs() < 1e-6);
    }

    #[test]
    fn thinning_bounds_and_mean() {
        let (_, m, act) = setup();
        let params = AcquisitionParams {
            target_true_counts: 2e5,
            background_fraction: 0.6,
            thin_ratio: 0.1,
        };
        let sim = simulate_counts(&m, &act, &params, 9, "x").unwrap();
        let thin = thin_counts(&sim.counts, 0.1, 9, "thin").unwrap();
        for (a, b) in thin.values.iter().zip(&sim.counts.values) {
            assert!(*a >= 0.0 && a.fract() == 0.0);
            assert!(a <= b, "thinned bin exceeds original");
        }
        let y_total = sim.counts.total();
        let expect = 0.1 * y_total;
        let sd = (0.1 * 0.9 * y_total).sqrt();
        let got = thin.total();
        assert!(
            (got - expect).abs() < 3.0 * sd,
            "thinned total {got} vs {expect} (sd {sd})"
        );
    }

    #[test]
    fn quantile_sampler_tracks_poisson_moments() {
        // 4000 draws at lambda = 20: sample mean within 3 standard errors,
        // sample variance within a loose factor of lambda.
        let mut rng = crate::rng::derive_rng(77, "poisson-moments");
        let lambda = 20.0;
        let n = 4000;
        let draws: Vec<f64> = (0..n).map(|_| sample_poisson(lambda, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (lambda / n as f64).sqrt();
        assert!((mean - lambda).abs() < 3.0 * se, "mean {mean} vs {lambda}");
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - lambda).abs() < 0.15 * lambda, "variance {var} vs {lambda}");
    }

    #[test]
    fn quantile_sampler_rejects_extreme_means() {
        let mut rng = crate::rng::derive_rng(78, "poisson-extreme");
        assert!(sample_poisson(16.0 * 601.0, &mut rng).is_err());
        assert!(sample_poisson(f64::NAN, &mut rng).is_err());
        assert_eq!(sample_poisson(0.0, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn paired_acquisitions_share_counts_in_unchanged_bins() {
        // Perturbing one voxel must not disturb the noise in bins whose
        // mean is untouched: matched scale + seed keep them bit-identical.
        let (grid, m, act) = setup();
        let params = AcquisitionParams::default();
        let base = simulate_counts(&m, &act, &params, 11, "pair").unwrap();
        let mut bumped = act.clone();
        bumped.values[grid.index(8, 8, 0)] += 0.5;
        let other = simulate_counts_matched(&m, &bumped, &params, 11, "pair", &base).unwrap();
        let mut same = 0usize;
        let mut diff_mean = 0usize;
        for i in 0..base.counts.values.len() {
            if base.trues_mean.values[i] == other.trues_mean.values[i] {
                same += 1;
                assert_eq!(
                    base.counts.values[i], other.counts.values[i],
                    "unchanged bin {i} lost synchronization"
                );
            } else {
                diff_mean += 1;
            }
        }
        assert!(same > 0 && diff_mean > 0, "perturbation should split bins");
    }

    #[test]
    fn thinning_rejects_non_integer_input() {
        let mut sino = Sinogram::zeros(1, 2, 2);
        sino.values[0] = 1.5;
        assert!(thin_counts(&sino, 0.5, 1, "t").is_err());
    }

    #[test]
    fn thin_ratio_one_is_identity() {
        let mut sino = Sinogram::zeros(1, 2, 2);
        sino.values.copy_from_slice(&[3.0, 0.0, 7.0, 1.0]);
        let out = thin_counts(&sino, 1.0, 4, "t").unwrap();
        assert_eq!(out, sino);
    }
}
