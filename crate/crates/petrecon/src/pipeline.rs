//! Subcommand orchestration: each stage reads the artifacts of earlier
//! stages from disk, writes its own, and records them in a manifest.
//!
//! Stages never mutate another stage's files, every byte written is a
//! deterministic function of the configuration and seed, and a missing
//! input names the subcommand that produces it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    simulate_counts, simulate_counts_matched, simulate_counts_scaled, thin_counts, SimulatedData,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{
    background_std, contrast_recovery, contrast_recovery_per_realization, lesion_difference,
    paired_mean_difference, place_background_rois, CurvePoint, MethodCurve, RoiSpec,
};
use crate::nn::{denoise_volume, pairs_from_volumes, train, NetworkWeights, SlicePair};
use crate::phantom::{frame_activity, test_phantom, training_phantom, LESION_LABEL};
use crate::plot::{write_curves_svg, PlotSeries};
use crate::projector::SystemMatrix;
use crate::recon::{
    gaussian_postfilter, mapem_fair, mlem, reconstruct_admm, MapemConfig, ReconConfig,
};
use crate::rng::derive_rng;
use crate::sinogram::MeanComponents;
use crate::volume::{ActivityVolume, LabelVolume};

/// Reconstruction method selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Mlem,
    Mapem,
    Gauss,
    CnnDenoise,
    CnnAdmm,
}

pub const ALL_METHODS: [Method; 5] = [
    Method::Mlem,
    Method::Mapem,
    Method::Gauss,
    Method::CnnDenoise,
    Method::CnnAdmm,
];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mlem => "mlem",
            Method::Mapem => "mapem",
            Method::Gauss => "gauss",
            Method::CnnDenoise => "cnn-denoise",
            Method::CnnAdmm => "cnn-admm",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        ALL_METHODS
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}'; expected one of mlem, mapem, gauss, cnn-denoise, cnn-admm"
                ))
            })
    }
}

/// One artifact recorded in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub kind: String,
    pub path: String,
    pub command: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn kind_of(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("piv") => "image",
        Some("psg") => "sinogram",
        Some("pnw") => "weights",
        Some("csv") => "csv",
        Some("svg") => "plot",
        _ => "csv",
    }
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Merge this command's artifacts into the manifest: entries with the
/// same path are replaced, everything is kept sorted by path.
fn record_artifacts(root: &Path, command: &str, hash: &str, files: &[String]) -> Result<()> {
    let mut manifest = load_manifest(root)?;
    manifest.entries.retain(|e| !files.contains(&e.path));
    for f in files {
        manifest.entries.push(ManifestEntry {
            kind: kind_of(f).to_string(),
            path: f.clone(),
            command: command.to_string(),
            config_hash: hash.to_string(),
        });
    }
    manifest.entries.sort_by(|a, b| a.path.cmp(&b.path));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::create_dir_all(root)?;
    std::fs::write(manifest_path(root), text + "\n")?;
    Ok(())
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        })
    }
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn scaled_means(means: &MeanComponents, k: f64) -> MeanComponents {
    let mut out = means.clone();
    for v in &mut out.scatter.values {
        *v *= k;
    }
    for v in &mut out.randoms.values {
        *v *= k;
    }
    out
}

// ---------------------------------------------------------------------
// Label volume storage: labels as exact integers in an image file plus a
// label -> tissue table.
// ---------------------------------------------------------------------

fn write_labels(root: &Path, labels: &LabelVolume) -> Result<()> {
    let vol = ActivityVolume {
        grid: labels.grid,
        values: labels.labels.iter().map(|&l| l as f64).collect(),
    };
    io::write_volume(&root.join("phantom/labels.piv"), &vol)?;
    let rows: Vec<Vec<String>> = labels
        .tissue_of
        .iter()
        .map(|(l, name)| vec![l.to_string(), name.clone()])
        .collect();
    io::write_csv(&root.join("phantom/tissues.csv"), "label,tissue", &rows)
}

fn read_labels(root: &Path, producer: &str) -> Result<LabelVolume> {
    let vol_path = root.join("phantom/labels.piv");
    let csv_path = root.join("phantom/tissues.csv");
    require(&vol_path, producer)?;
    require(&csv_path, producer)?;
    let vol = io::read_volume(&vol_path)?;
    let labels = vol
        .values
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
                Ok(v as u32)
            } else {
                Err(Error::Format {
                    path: vol_path.display().to_string(),
                    reason: format!("label value {v} is not an unsigned integer"),
                })
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    let text = std::fs::read_to_string(&csv_path)?;
    let mut lines = text.lines();
    if lines.next() != Some("label,tissue") {
        return Err(Error::Format {
            path: csv_path.display().to_string(),
            reason: "first line must be 'label,tissue'".into(),
        });
    }
    let mut tissue_of = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (l, name) = line.split_once(',').ok_or_else(|| Error::Format {
            path: csv_path.display().to_string(),
            reason: format!("malformed row '{line}'"),
        })?;
        let label: u32 = l.parse().map_err(|_| Error::Format {
            path: csv_path.display().to_string(),
            reason: format!("bad label '{l}'"),
        })?;
        tissue_of.push((label, name.to_string()));
    }
    Ok(LabelVolume {
        grid: vol.grid,
        labels,
        tissue_of,
    })
}

fn write_scales(root: &Path, scale_high: f64, scale_low: f64) -> Result<()> {
    io::write_csv(
        &root.join("sino/scale.csv"),
        "key,value",
        &[
            vec!["scale_high".into(), f(scale_high)],
            vec!["scale_low".into(), f(scale_low)],
        ],
    )
}

fn read_scale(root: &Path, key: &str, producer: &str) -> Result<f64> {
    let path = root.join("sino/scale.csv");
    require(&path, producer)?;
    let text = std::fs::read_to_string(&path)?;
    for line in text.lines().skip(1) {
        if let Some((k, v)) = line.split_once(',') {
            if k == key {
                return v.parse().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("bad {key} value '{v}'"),
                });
            }
        }
    }
    Err(Error::Format {
        path: path.display().to_string(),
        reason: format!("no '{key}' row"),
    })
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

/// Rasterize the held-out test phantom, with and without lesions, and
/// integrate the frame-averaged activity.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let p = &cfg.phantom;
    let (spec, table) = test_phantom();
    let labels = spec.rasterize(&cfg.grid)?;
    let labels_nolesion = spec.without_lesions().rasterize(&cfg.grid)?;
    let truth = frame_activity(
        &labels,
        &table,
        &p.input,
        p.frame_start,
        p.frame_end,
        p.ode_step,
    )?;
    let truth_nolesion = frame_activity(
        &labels_nolesion,
        &table,
        &p.input,
        p.frame_start,
        p.frame_end,
        p.ode_step,
    )?;
    io::write_volume(&root.join("phantom/truth.piv"), &truth)?;
    io::write_volume(&root.join("phantom/truth_nolesion.piv"), &truth_nolesion)?;
    write_labels(&root, &labels)?;
    record_artifacts(
        &root,
        "phantom",
        &cfg.config_hash(),
        &[
            "phantom/truth.piv".into(),
            "phantom/truth_nolesion.piv".into(),
            "phantom/labels.piv".into(),
            "phantom/tissues.csv".into(),
        ],
    )
}

/// Count settings of the low-dose scan: the high-dose target scaled by
/// the thinning ratio.
fn low_params(a: &crate::acquisition::AcquisitionParams) -> crate::acquisition::AcquisitionParams {
    crate::acquisition::AcquisitionParams {
        target_true_counts: a.target_true_counts * a.thin_ratio,
        ..*a
    }
}

/// Simulate the test scans: a high-count scan (label quality), the
/// low-count scan every method reconstructs, its lesion-free twin under
/// identical noise streams, and the ground truth in the low scan's
/// intensity units.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let truth_path = root.join("phantom/truth.piv");
    let nolesion_path = root.join("phantom/truth_nolesion.piv");
    require(&truth_path, "phantom")?;
    require(&nolesion_path, "phantom")?;
    let truth = io::read_volume(&truth_path)?;
    let truth_nolesion = io::read_volume(&nolesion_path)?;
    let matrix = SystemMatrix::build(&cfg.grid, &cfg.scanner)?;

    let high = simulate_counts(&matrix, &truth, &cfg.acquisition, cfg.seed, "acq-test")?;
    let low_p = low_params(&cfg.acquisition);
    let low = simulate_counts(&matrix, &truth, &low_p, cfg.seed, "acq-test-low")?;
    let twin = simulate_counts_matched(
        &matrix,
        &truth_nolesion,
        &low_p,
        cfg.seed,
        "acq-test-low",
        &low,
    )?;
    let reference = ActivityVolume {
        grid: truth.grid,
        values: truth.values.iter().map(|v| v * low.scale).collect(),
    };

    io::write_sinogram(&root.join("sino/test.psg"), &high.counts)?;
    io::write_sinogram(&root.join("sino/test_scatter.psg"), &high.means.scatter)?;
    io::write_sinogram(&root.join("sino/test_randoms.psg"), &high.means.randoms)?;
    io::write_sinogram(&root.join("sino/test_low.psg"), &low.counts)?;
    io::write_sinogram(&root.join("sino/test_low_scatter.psg"), &low.means.scatter)?;
    io::write_sinogram(&root.join("sino/test_low_randoms.psg"), &low.means.randoms)?;
    io::write_sinogram(&root.join("sino/test_low_nolesion.psg"), &twin.counts)?;
    io::write_volume(&root.join("sino/reference.piv"), &reference)?;
    write_scales(&root, high.scale, low.scale)?;
    record_artifacts(
        &root,
        "simulate",
        &cfg.config_hash(),
        &[
            "sino/test.psg".into(),
            "sino/test_scatter.psg".into(),
            "sino/test_randoms.psg".into(),
            "sino/test_low.psg".into(),
            "sino/test_low_scatter.psg".into(),
            "sino/test_low_randoms.psg".into(),
            "sino/test_low_nolesion.psg".into(),
            "sino/reference.piv".into(),
            "sino/scale.csv".into(),
        ],
    )
}

/// Generate jittered training phantoms, scan each at the high count
/// level, thin to the low count level, reconstruct both, and store
/// (noisy snapshot, clean label) volume pairs.
pub fn cmd_build_train_set(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let matrix = SystemMatrix::build(&cfg.grid, &cfg.scanner)?;
    let t = &cfg.training;
    let label_cfg = ReconConfig {
        iterations: t.label_iterations,
        snapshots: vec![],
    };
    let input_cfg = ReconConfig {
        iterations: *t.input_snapshots.last().expect("validated non-empty"),
        snapshots: t.input_snapshots.clone(),
    };

    struct PhantomPairs {
        index: usize,
        label: ActivityVolume,
        inputs: Vec<(usize, ActivityVolume)>,
    }
    let sets: Vec<PhantomPairs> = (0..cfg.phantom.train_phantoms)
        .into_par_iter()
        .map(|i| -> Result<PhantomPairs> {
            let p = &cfg.phantom;
            let (spec, table) =
                training_phantom(cfg.seed, i as u64, p.jitter, p.kinetic_cv, &cfg.grid)?;
            let labels = spec.rasterize(&cfg.grid)?;
            let activity = frame_activity(
                &labels,
                &table,
                &p.input,
                p.frame_start,
                p.frame_end,
                p.ode_step,
            )?;
            let sim = simulate_counts(
                &matrix,
                &activity,
                &cfg.acquisition,
                cfg.seed,
                &format!("acq-train-{i}"),
            )?;
            let thinned = thin_counts(
                &sim.counts,
                cfg.acquisition.thin_ratio,
                cfg.seed,
                &format!("thin-train-{i}"),
            )?;
            let low_means = scaled_means(&sim.means, cfg.acquisition.thin_ratio);
            // Thinned counts estimate `ratio * scale * x`, the same units
            // every low-dose test reconstruction has. The high-count label
            // is brought into those units so the network learns denoising
            // rather than a gain.
            let mut label =
                mlem(&matrix, &sim.counts, &sim.means, &cfg.grid, &label_cfg)?.volume;
            for v in &mut label.values {
                *v *= cfg.acquisition.thin_ratio;
            }
            let low = mlem(&matrix, &thinned, &low_means, &cfg.grid, &input_cfg)?;
            Ok(PhantomPairs {
                index: i,
                label,
                inputs: low.snapshots,
            })
        })
        .collect::<Result<_>>()?;

    let mut files = Vec::new();
    let mut rows = Vec::new();
    for set in &sets {
        let label_name = format!("train/phantom{:02}_label.piv", set.index);
        io::write_volume(&root.join(&label_name), &set.label)?;
        for (it, vol) in &set.inputs {
            let input_name = format!("train/phantom{:02}_input{it:03}.piv", set.index);
            io::write_volume(&root.join(&input_name), vol)?;
            rows.push(vec![input_name.clone(), label_name.clone()]);
            files.push(input_name);
        }
        files.push(label_name);
    }
    io::write_csv(&root.join("train/pairs.csv"), "input,label", &rows)?;
    files.push("train/pairs.csv".into());
    files.sort();
    record_artifacts(&root, "build-train-set", &cfg.config_hash(), &files)
}

fn load_training_pairs(cfg: &RunConfig) -> Result<Vec<SlicePair>> {
    let root = cfg.resolved_output_dir();
    let csv_path = root.join("train/pairs.csv");
    require(&csv_path, "build-train-set")?;
    let text = std::fs::read_to_string(&csv_path)?;
    let mut lines = text.lines();
    if lines.next() != Some("input,label") {
        return Err(Error::Format {
            path: csv_path.display().to_string(),
            reason: "first line must be 'input,label'".into(),
        });
    }
    let mut pairs = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (input, label) = line.split_once(',').ok_or_else(|| Error::Format {
            path: csv_path.display().to_string(),
            reason: format!("malformed row '{line}'"),
        })?;
        let input_path = root.join(input);
        let label_path = root.join(label);
        require(&input_path, "build-train-set")?;
        require(&label_path, "build-train-set")?;
        let noisy = io::read_volume(&input_path)?;
        let clean = io::read_volume(&label_path)?;
        pairs.extend(pairs_from_volumes(&noisy, &clean, cfg.network.in_channels)?);
    }
    Ok(pairs)
}

/// Fit the denoising network on the stored pairs and write the weights
/// plus the per-epoch loss history.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let pairs = load_training_pairs(cfg)?;
    let mut net =
        NetworkWeights::init_residual(&cfg.network, &mut derive_rng(cfg.seed, "train-init"))?;
    let report = train(&mut net, &pairs, &cfg.training.optimizer, cfg.seed)?;
    io::write_weights(&root.join("train/weights.pnw"), &net)?;
    let rows: Vec<Vec<String>> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, loss)| vec![(e + 1).to_string(), f(*loss)])
        .collect();
    io::write_csv(&root.join("train/loss.csv"), "epoch,mse", &rows)?;
    record_artifacts(
        &root,
        "train",
        &cfg.config_hash(),
        &["train/weights.pnw".into(), "train/loss.csv".into()],
    )
}

#[derive(Debug)]
struct TestScan {
    counts: crate::sinogram::Sinogram,
    means: MeanComponents,
}

/// The low-dose test scan, which every reconstruction method targets.
fn load_low_scan(root: &Path) -> Result<TestScan> {
    let counts_path = root.join("sino/test_low.psg");
    let scatter_path = root.join("sino/test_low_scatter.psg");
    let randoms_path = root.join("sino/test_low_randoms.psg");
    for p in [&counts_path, &scatter_path, &randoms_path] {
        require(p, "simulate")?;
    }
    Ok(TestScan {
        counts: io::read_sinogram(&counts_path)?,
        means: MeanComponents {
            scatter: io::read_sinogram(&scatter_path)?,
            randoms: io::read_sinogram(&randoms_path)?,
        },
    })
}

fn load_weights(root: &Path) -> Result<NetworkWeights> {
    let path = root.join("train/weights.pnw");
    require(&path, "train")?;
    io::read_weights(&path)
}

/// Reconstruct the test scan with one method and write the image plus
/// any per-iteration diagnostics.
pub fn cmd_reconstruct(cfg: &RunConfig, method: Method, fwhm: Option<f64>) -> Result<()> {
    if fwhm.is_some() && method != Method::Gauss {
        return Err(Error::Config(
            "--fwhm only applies to the gauss method".into(),
        ));
    }
    let root = cfg.resolved_output_dir();
    let scan = load_low_scan(&root)?;
    let matrix = SystemMatrix::build(&cfg.grid, &cfg.scanner)?;
    let mut files: Vec<String> = Vec::new();

    match method {
        Method::Mlem => {
            let res = mlem(&matrix, &scan.counts, &scan.means, &cfg.grid, &cfg.recon.mlem)?;
            io::write_volume(&root.join("recon/mlem.piv"), &res.volume)?;
            files.push("recon/mlem.piv".into());
            for (it, vol) in &res.snapshots {
                let name = format!("recon/mlem_iter{it:03}.piv");
                io::write_volume(&root.join(&name), vol)?;
                files.push(name);
            }
            let rows: Vec<Vec<String>> = res
                .loglik
                .iter()
                .enumerate()
                .map(|(i, l)| vec![(i + 1).to_string(), f(*l)])
                .collect();
            io::write_csv(&root.join("recon/mlem_loglik.csv"), "iter,loglik", &rows)?;
            files.push("recon/mlem_loglik.csv".into());
        }
        Method::Mapem => {
            let res = mapem_fair(&matrix, &scan.counts, &scan.means, &cfg.grid, &cfg.recon.mapem)?;
            io::write_volume(&root.join("recon/mapem.piv"), &res.volume)?;
            files.push("recon/mapem.piv".into());
            let rows: Vec<Vec<String>> = res
                .objective
                .iter()
                .enumerate()
                .map(|(i, l)| vec![(i + 1).to_string(), f(*l)])
                .collect();
            io::write_csv(
                &root.join("recon/mapem_objective.csv"),
                "iter,objective",
                &rows,
            )?;
            files.push("recon/mapem_objective.csv".into());
        }
        Method::Gauss => {
            let res = mlem(&matrix, &scan.counts, &scan.means, &cfg.grid, &cfg.recon.mlem)?;
            let width = fwhm.unwrap_or(cfg.recon.gauss_fwhm);
            let filtered = gaussian_postfilter(&res.volume, width)?;
            io::write_volume(&root.join("recon/gauss.piv"), &filtered)?;
            files.push("recon/gauss.piv".into());
        }
        Method::CnnDenoise => {
            let net = load_weights(&root)?;
            let res = mlem(&matrix, &scan.counts, &scan.means, &cfg.grid, &cfg.recon.mlem)?;
            let denoised = denoise_volume(&net, &res.volume)?;
            io::write_volume(&root.join("recon/cnn-denoise.piv"), &denoised)?;
            files.push("recon/cnn-denoise.piv".into());
        }
        Method::CnnAdmm => {
            let net = load_weights(&root)?;
            let res = reconstruct_admm(
                &matrix,
                &scan.counts,
                &scan.means,
                &cfg.grid,
                &net,
                &cfg.recon.admm,
            )?;
            io::write_volume(&root.join("recon/cnn-admm.piv"), &res.volume)?;
            files.push("recon/cnn-admm.piv".into());
            for (it, vol) in &res.snapshots {
                let name = format!("recon/cnn-admm_iter{it:03}.piv");
                io::write_volume(&root.join(&name), vol)?;
                files.push(name);
            }
            let rows: Vec<Vec<String>> = res
                .diagnostics
                .iter()
                .map(|d| {
                    vec![
                        d.iter.to_string(),
                        f(d.loglik),
                        f(d.residual),
                        f(d.alpha_obj),
                        f(d.step),
                    ]
                })
                .collect();
            io::write_csv(
                &root.join("recon/cnn-admm_diag.csv"),
                "iter,loglik,residual,alpha_obj,step",
                &rows,
            )?;
            files.push("recon/cnn-admm_diag.csv".into());
        }
    }
    files.sort();
    let command = format!("reconstruct --method {}", method.name());
    record_artifacts(&root, &command, &cfg.config_hash(), &files)
}

// ---------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------

fn curve_from_sets(
    method: &str,
    sweep_values: &[f64],
    sets: &[Vec<ActivityVolume>],
    roi: &RoiSpec,
) -> Result<MethodCurve> {
    let mut points = Vec::new();
    let mut per_real = Vec::new();
    for (value, set) in sweep_values.iter().zip(sets) {
        points.push(CurvePoint {
            sweep_value: *value,
            std: background_std(set, roi)?,
            cr: contrast_recovery(set, roi)?,
        });
        per_real.push(contrast_recovery_per_realization(set, roi)?);
    }
    let curve = MethodCurve {
        method: method.to_string(),
        points,
        cr_per_realization: per_real,
    };
    curve.validate()?;
    Ok(curve)
}

/// Pick a snapshot by iteration number.
fn snapshot_at(snapshots: &[(usize, ActivityVolume)], it: usize) -> Result<&ActivityVolume> {
    snapshots
        .iter()
        .find(|(i, _)| *i == it)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Numerical(format!("snapshot at iteration {it} was not recorded")))
}

/// The noise level all methods are compared at: configured explicitly,
/// or the midpoint of the noise ranges shared by the compared curves.
fn matched_target(cfg: &RunConfig, curves: &[&MethodCurve]) -> Result<f64> {
    if let Some(t) = cfg.eval.matched_std {
        return Ok(t);
    }
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for c in curves {
        let (a, b) = c
            .std_range()
            .ok_or_else(|| Error::Numerical(format!("curve '{}' is empty", c.method)))?;
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if lo > hi {
        return Err(Error::Numerical(format!(
            "method noise ranges do not overlap (common range [{lo}, {hi}]); adjust the eval sweeps"
        )));
    }
    Ok(0.5 * (lo + hi))
}

/// Sweep every method over fresh noise realizations of the test scan,
/// write the contrast/noise curves, the matched-noise comparison, and
/// the lesion-present minus lesion-absent difference image.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let truth_path = root.join("phantom/truth.piv");
    require(&truth_path, "phantom")?;
    let truth = io::read_volume(&truth_path)?;
    let labels = read_labels(&root, "phantom")?;
    let reference_path = root.join("sino/reference.piv");
    require(&reference_path, "simulate")?;
    let reference = io::read_volume(&reference_path)?;
    let scale_low = read_scale(&root, "scale_low", "simulate")?;
    let scan = load_low_scan(&root)?;
    let twin_path = root.join("sino/test_low_nolesion.psg");
    require(&twin_path, "simulate")?;
    let twin_counts = io::read_sinogram(&twin_path)?;
    let net = load_weights(&root)?;
    let matrix = SystemMatrix::build(&cfg.grid, &cfg.scanner)?;
    let e = &cfg.eval;

    // Regions: the lesion voxels against the scaled truth, and background
    // discs placed in the configured tissue.
    let lesion_voxels = labels.voxels_with_label(LESION_LABEL);
    if lesion_voxels.is_empty() {
        return Err(Error::Config("test phantom has no lesion voxels".into()));
    }
    let a_true =
        lesion_voxels.iter().map(|&j| reference.values[j]).sum::<f64>() / lesion_voxels.len() as f64;
    let roi = RoiSpec {
        lesion_voxels,
        a_true,
        background_rois: place_background_rois(
            &labels,
            &e.roi_tissue,
            e.background_rois,
            e.roi_radius_vox,
            cfg.seed,
        )?,
    };

    // Fresh noise realizations of the low-dose scan at its exact
    // activity scale.
    let low_p = low_params(&cfg.acquisition);
    let sims: Vec<SimulatedData> = (0..e.realizations)
        .into_par_iter()
        .map(|r| {
            simulate_counts_scaled(
                &matrix,
                &truth,
                &low_p,
                cfg.seed,
                &format!("acq-eval-{r}"),
                scale_low,
            )
        })
        .collect::<Result<_>>()?;

    // One long reconstruction per realization covers the iteration sweep,
    // the post-filter input, and the denoiser inputs.
    let mut wanted: BTreeSet<usize> = e.mlem_sweep.iter().copied().collect();
    wanted.extend(e.denoise_input_iterations.iter().copied());
    wanted.insert(cfg.recon.mlem.iterations);
    let snapshots: Vec<usize> = wanted.into_iter().collect();
    let base_cfg = ReconConfig {
        iterations: *snapshots.last().expect("non-empty"),
        snapshots,
    };
    let runs: Vec<Vec<(usize, ActivityVolume)>> = sims
        .par_iter()
        .map(|sim| {
            mlem(&matrix, &sim.counts, &sim.means, &cfg.grid, &base_cfg).map(|r| r.snapshots)
        })
        .collect::<Result<_>>()?;

    let collect_sets = |iters: &[usize]| -> Result<Vec<Vec<ActivityVolume>>> {
        iters
            .iter()
            .map(|&it| {
                runs.iter()
                    .map(|snaps| snapshot_at(snaps, it).cloned())
                    .collect()
            })
            .collect()
    };

    let mlem_sets = collect_sets(&e.mlem_sweep)?;
    let mlem_curve = curve_from_sets(
        "mlem",
        &e.mlem_sweep.iter().map(|&i| i as f64).collect::<Vec<_>>(),
        &mlem_sets,
        &roi,
    )?;

    let gauss_sets: Vec<Vec<ActivityVolume>> = e
        .gauss_fwhms
        .iter()
        .map(|&w| {
            runs.iter()
                .map(|snaps| gaussian_postfilter(snapshot_at(snaps, cfg.recon.mlem.iterations)?, w))
                .collect()
        })
        .collect::<Result<_>>()?;
    let gauss_curve = curve_from_sets("gauss", &e.gauss_fwhms, &gauss_sets, &roi)?;

    let mapem_sets: Vec<Vec<ActivityVolume>> = e
        .mapem_betas
        .iter()
        .map(|&beta| {
            let m_cfg = MapemConfig {
                beta,
                ..cfg.recon.mapem.clone()
            };
            sims.par_iter()
                .map(|sim| {
                    mapem_fair(&matrix, &sim.counts, &sim.means, &cfg.grid, &m_cfg)
                        .map(|r| r.volume)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mapem_curve = curve_from_sets("mapem", &e.mapem_betas, &mapem_sets, &roi)?;

    let denoise_sets: Vec<Vec<ActivityVolume>> = e
        .denoise_input_iterations
        .iter()
        .map(|&it| {
            runs.par_iter()
                .map(|snaps| denoise_volume(&net, snapshot_at(snaps, it)?))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let denoise_curve = curve_from_sets(
        "cnn-denoise",
        &e.denoise_input_iterations
            .iter()
            .map(|&i| i as f64)
            .collect::<Vec<_>>(),
        &denoise_sets,
        &roi,
    )?;

    let admm_results: Vec<Vec<(usize, ActivityVolume)>> = sims
        .par_iter()
        .map(|sim| {
            reconstruct_admm(
                &matrix,
                &sim.counts,
                &sim.means,
                &cfg.grid,
                &net,
                &cfg.recon.admm,
            )
            .map(|r| r.snapshots)
        })
        .collect::<Result<_>>()?;
    let admm_iters: Vec<usize> = if cfg.recon.admm.snapshots.is_empty() {
        vec![cfg.recon.admm.max_iterations]
    } else {
        cfg.recon.admm.snapshots.clone()
    };
    let admm_sets: Vec<Vec<ActivityVolume>> = admm_iters
        .iter()
        .map(|&it| {
            admm_results
                .iter()
                .map(|snaps| snapshot_at(snaps, it).cloned())
                .collect()
        })
        .collect::<Result<_>>()?;
    let admm_curve = curve_from_sets(
        "cnn-admm",
        &admm_iters.iter().map(|&i| i as f64).collect::<Vec<_>>(),
        &admm_sets,
        &roi,
    )?;

    // Persist the curves.
    let curves = [
        &mlem_curve,
        &mapem_curve,
        &gauss_curve,
        &denoise_curve,
        &admm_curve,
    ];
    let mut rows = Vec::new();
    for c in curves {
        for p in &c.points {
            rows.push(vec![c.method.clone(), f(p.sweep_value), f(p.std), f(p.cr)]);
        }
    }
    io::write_csv(&root.join("eval/curves.csv"), "method,sweep_value,std,cr", &rows)?;

    // Matched-noise comparison of the smoothing methods.
    let compared = [&gauss_curve, &denoise_curve, &admm_curve];
    let target = matched_target(cfg, &compared)?;
    let mut matched = Vec::new();
    for c in compared {
        let m = c.cr_at_std(target).ok_or_else(|| {
            Error::Numerical(format!(
                "curve '{}' does not reach the matched noise level {target}",
                c.method
            ))
        })?;
        matched.push((c.method.clone(), m));
    }
    let mut summary = vec![vec!["matched_std".to_string(), f(target)]];
    for (name, m) in &matched {
        summary.push(vec![format!("cr_{}", name.replace('-', "_")), f(m.cr)]);
    }
    for (i, j, label) in [
        (1usize, 0usize, "margin_cnn_denoise_vs_gauss"),
        (2, 1, "margin_cnn_admm_vs_cnn_denoise"),
        (2, 0, "margin_cnn_admm_vs_gauss"),
    ] {
        let d = paired_mean_difference(&matched[i].1.per_realization, &matched[j].1.per_realization)?;
        summary.push(vec![label.to_string(), f(d)]);
    }
    io::write_csv(&root.join("eval/summary.csv"), "key,value", &summary)?;

    // Lesion-present minus lesion-absent under shared noise streams.
    let with = mlem(&matrix, &scan.counts, &scan.means, &cfg.grid, &cfg.recon.mlem)?.volume;
    let without = mlem(&matrix, &twin_counts, &scan.means, &cfg.grid, &cfg.recon.mlem)?.volume;
    let diff = lesion_difference(&with, &without)?;
    io::write_volume(&root.join("eval/lesion_diff.piv"), &diff)?;

    record_artifacts(
        &root,
        "evaluate",
        &cfg.config_hash(),
        &[
            "eval/curves.csv".into(),
            "eval/summary.csv".into(),
            "eval/lesion_diff.piv".into(),
        ],
    )
}

/// Render the stored curves as an SVG plot.
pub fn cmd_plot(cfg: &RunConfig) -> Result<()> {
    let root = cfg.resolved_output_dir();
    let curves_path = root.join("eval/curves.csv");
    require(&curves_path, "evaluate")?;
    let rows = io::read_curve_rows(&curves_path)?;
    let mut series: Vec<PlotSeries> = Vec::new();
    for (method, _, std, cr) in rows {
        match series.iter_mut().find(|s| s.name == method) {
            Some(s) => s.points.push((std, cr)),
            None => series.push(PlotSeries {
                name: method,
                points: vec![(std, cr)],
            }),
        }
    }
    write_curves_svg(
        &root.join("plot/cr_std.svg"),
        &series,
        "contrast recovery vs background noise",
    )?;
    record_artifacts(
        &root,
        "plot",
        &cfg.config_hash(),
        &["plot/cr_std.svg".into()],
    )
}

/// Run the whole pipeline in order with one seed.
pub fn cmd_all(cfg: &RunConfig) -> Result<()> {
    cmd_phantom(cfg)?;
    cmd_simulate(cfg)?;
    cmd_build_train_set(cfg)?;
    cmd_train(cfg)?;
    for method in ALL_METHODS {
        cmd_reconstruct(cfg, method, None)?;
    }
    cmd_evaluate(cfg)?;
    cmd_plot(cfg)
}
