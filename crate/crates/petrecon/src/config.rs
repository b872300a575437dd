//! Run configuration: a single TOML file, with CLI overrides for seed and
//! thread count, drives every subcommand.
//!
//! Unknown keys are rejected everywhere, every default is printable via
//! `--print-defaults`, and a canonical hash ties artifacts to the exact
//! configuration that produced them. The thread count never changes
//! results, so it is normalized to zero before hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::AcquisitionParams;
use crate::error::{Error, Result};
use crate::nn::{NetworkConfig, TrainConfig};
use crate::phantom::kinetics::InputFunctionParams;
use crate::projector::ScannerGeometry;
use crate::recon::{AdmmConfig, MapemConfig, ReconConfig};
use crate::volume::ImageGrid;

/// Phantom geometry jitter, kinetic sampling, and frame timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    /// Relative jitter applied to organ semi-axes for training phantoms.
    pub jitter: f64,
    /// Coefficient of variation for sampled kinetic parameters.
    pub kinetic_cv: f64,
    /// Number of training phantoms; the test phantom is always separate.
    pub train_phantoms: usize,
    /// Frame window in minutes post injection.
    pub frame_start: f64,
    pub frame_end: f64,
    /// Step of the kinetic integrator, minutes.
    pub ode_step: f64,
    /// Blood input curve coefficients.
    pub input: InputFunctionParams,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            jitter: 0.1,
            kinetic_cv: 0.1,
            train_phantoms: 18,
            frame_start: 20.0,
            frame_end: 60.0,
            ode_step: 0.01,
            input: InputFunctionParams::default(),
        }
    }
}

impl PhantomSection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!(
                "phantom.jitter must be in [0, 1): got {}",
                self.jitter
            )));
        }
        if !(0.0..1.0).contains(&self.kinetic_cv) {
            return Err(Error::Config(format!(
                "phantom.kinetic_cv must be in [0, 1): got {}",
                self.kinetic_cv
            )));
        }
        if self.train_phantoms == 0 {
            return Err(Error::Config(
                "phantom.train_phantoms must be positive".into(),
            ));
        }
        if !(self.frame_start >= 0.0 && self.frame_end > self.frame_start) {
            return Err(Error::Config(format!(
                "phantom.frame_start/frame_end must satisfy 0 <= start < end: got {} and {}",
                self.frame_start, self.frame_end
            )));
        }
        if !(self.ode_step > 0.0 && self.ode_step <= self.frame_end) {
            return Err(Error::Config(format!(
                "phantom.ode_step must be in (0, frame_end]: got {}",
                self.ode_step
            )));
        }
        Ok(())
    }
}

/// Settings for building the training set and fitting the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Iterations of the high-count reconstruction used as the label.
    pub label_iterations: usize,
    /// Snapshot iterations of the thinned reconstruction used as inputs.
    pub input_snapshots: Vec<usize>,
    pub optimizer: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            label_iterations: 60,
            input_snapshots: vec![20, 40, 60],
            optimizer: TrainConfig::default(),
        }
    }
}

impl TrainingSection {
    pub fn validate(&self) -> Result<()> {
        if self.label_iterations == 0 {
            return Err(Error::Config(
                "training.label_iterations must be positive".into(),
            ));
        }
        if self.input_snapshots.is_empty() || self.input_snapshots.contains(&0) {
            return Err(Error::Config(
                "training.input_snapshots must be a non-empty list of positive iterations".into(),
            ));
        }
        if self.input_snapshots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "training.input_snapshots must be strictly increasing".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Per-method reconstruction settings for the `reconstruct` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSection {
    /// Post-filter width in millimetres for the `gauss` method.
    pub gauss_fwhm: f64,
    pub mlem: ReconConfig,
    pub mapem: MapemConfig,
    pub admm: AdmmConfig,
}

impl Default for ReconSection {
    fn default() -> Self {
        ReconSection {
            gauss_fwhm: 4.0,
            mlem: ReconConfig::default(),
            mapem: MapemConfig::default(),
            admm: AdmmConfig::default(),
        }
    }
}

impl ReconSection {
    pub fn validate(&self) -> Result<()> {
        if !(self.gauss_fwhm >= 0.0) || !self.gauss_fwhm.is_finite() {
            return Err(Error::Config(format!(
                "recon.gauss_fwhm must be finite and non-negative: got {}",
                self.gauss_fwhm
            )));
        }
        self.mlem.validate()?;
        self.mapem.validate()?;
        self.admm.validate()
    }
}

/// Evaluation protocol: noise realizations, background ROIs, and the
/// per-method parameter sweeps that trace contrast/noise curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Independent noise realizations of the test scan.
    pub realizations: usize,
    /// Number of background discs and their radius in voxels.
    pub background_rois: usize,
    pub roi_radius_vox: f64,
    /// Tissue in which background discs are placed.
    pub roi_tissue: String,
    /// Iteration sweep for the plain and post-filtered reconstructions.
    pub mlem_sweep: Vec<usize>,
    /// Filter widths (mm) swept for the post-filter curve.
    pub gauss_fwhms: Vec<f64>,
    /// Penalty strengths swept for the penalized curve.
    pub mapem_betas: Vec<f64>,
    /// Input iteration counts swept for the denoiser curve.
    pub denoise_input_iterations: Vec<usize>,
    /// Background noise level at which curves are compared; when absent,
    /// the midpoint of the overlapping range is used.
    pub matched_std: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            realizations: 20,
            background_rois: 42,
            roi_radius_vox: 3.0,
            roi_tissue: "lung".into(),
            mlem_sweep: vec![10, 20, 30, 40, 60, 80, 100],
            gauss_fwhms: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0],
            mapem_betas: vec![0.3, 1.0, 3.0, 10.0, 30.0],
            denoise_input_iterations: vec![20, 40, 60, 80, 100],
            matched_std: None,
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.realizations < 2 {
            return Err(Error::Config(format!(
                "eval.realizations must be at least 2: got {}",
                self.realizations
            )));
        }
        if self.background_rois == 0 {
            return Err(Error::Config("eval.background_rois must be positive".into()));
        }
        if !(self.roi_radius_vox > 0.0) {
            return Err(Error::Config(format!(
                "eval.roi_radius_vox must be positive: got {}",
                self.roi_radius_vox
            )));
        }
        if self.roi_tissue.is_empty() {
            return Err(Error::Config("eval.roi_tissue must be non-empty".into()));
        }
        for (name, empty) in [
            ("mlem_sweep", self.mlem_sweep.is_empty()),
            ("gauss_fwhms", self.gauss_fwhms.is_empty()),
            ("mapem_betas", self.mapem_betas.is_empty()),
            (
                "denoise_input_iterations",
                self.denoise_input_iterations.is_empty(),
            ),
        ] {
            if empty {
                return Err(Error::Config(format!("eval.{name} must be non-empty")));
            }
        }
        if self.mlem_sweep.contains(&0) || self.denoise_input_iterations.contains(&0) {
            return Err(Error::Config(
                "eval iteration sweeps must contain positive iterations".into(),
            ));
        }
        for list in [&self.mlem_sweep, &self.denoise_input_iterations] {
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(
                    "eval iteration sweeps must be strictly increasing".into(),
                ));
            }
        }
        if self.gauss_fwhms.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::Config(
                "eval.gauss_fwhms must be finite and non-negative".into(),
            ));
        }
        if self.mapem_betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config(
                "eval.mapem_betas must be finite and non-negative".into(),
            ));
        }
        if let Some(s) = self.matched_std {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!(
                    "eval.matched_std must be positive: got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// The full run configuration. Scalar settings live at the top level;
/// each pipeline stage owns one section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it by label.
    pub seed: u64,
    /// Artifact directory, relative to the configuration file.
    pub output_dir: PathBuf,
    /// Worker cap for internal parallelism; 0 means all cores. Never
    /// affects results, so it is excluded from the configuration hash.
    pub threads: usize,
    pub grid: ImageGrid,
    pub scanner: ScannerGeometry,
    pub phantom: PhantomSection,
    pub acquisition: AcquisitionParams,
    pub training: TrainingSection,
    pub network: NetworkConfig,
    pub recon: ReconSection,
    pub eval: EvalSection,
    /// Directory of the configuration file itself; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            output_dir: PathBuf::from("out"),
            threads: 0,
            grid: ImageGrid::default(),
            scanner: ScannerGeometry::default(),
            phantom: PhantomSection::default(),
            acquisition: AcquisitionParams::default(),
            training: TrainingSection::default(),
            network: NetworkConfig::default(),
            recon: ReconSection::default(),
            eval: EvalSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must be non-empty".into()));
        }
        self.grid.validate()?;
        self.scanner.validate()?;
        self.phantom.validate()?;
        self.acquisition.validate()?;
        self.training.validate()?;
        self.network.validate()?;
        self.recon.validate()?;
        self.eval.validate()
    }

    /// Artifact root: `output_dir` resolved against the config location.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    /// Canonical serialization used for hashing and `--print-defaults`;
    /// the thread count is normalized to zero first.
    pub fn canonical_toml(&self) -> String {
        let mut canon = self.clone();
        canon.threads = 0;
        canon.base_dir = PathBuf::new();
        toml::to_string_pretty(&canon).expect("config serializes")
    }

    /// Hex digest identifying this configuration.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse and validate a configuration from TOML text. An empty string
/// yields all defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a configuration file and resolve `output_dir` against its parent
/// directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut cfg = parse_config(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults_and_round_trips() {
        let parsed = parse_config("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        let text = parsed.canonical_toml();
        let again = parse_config(&text).unwrap();
        assert_eq!(again, parsed);
    }

    #[test]
    fn defaults_are_valid_and_printable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.canonical_toml();
        for section in [
            "[grid]",
            "[scanner]",
            "[phantom]",
            "[acquisition]",
            "[training]",
            "[network]",
            "[recon.mlem]",
            "[recon.mapem]",
            "[recon.admm]",
            "[eval]",
        ] {
            assert!(text.contains(section), "missing {section} in:\n{text}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config("frobnicate = 1").unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
        let err = parse_config("[grid]\nnx = 8\npitch = 2.0").unwrap_err();
        assert!(err.to_string().contains("pitch"), "{err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn out_of_range_value_names_the_key() {
        let err = parse_config("[acquisition]\nbackground_fraction = 1.5").unwrap_err();
        assert!(err.to_string().contains("background_fraction"), "{err}");
        let err = parse_config("[eval]\nrealizations = 1").unwrap_err();
        assert!(err.to_string().contains("realizations"), "{err}");
    }

    #[test]
    fn hash_ignores_threads_but_tracks_everything_else() {
        let base = RunConfig::default();
        let mut threaded = base.clone();
        threaded.threads = 8;
        assert_eq!(base.config_hash(), threaded.config_hash());

        let mut reseeded = base.clone();
        reseeded.seed = 8;
        assert_ne!(base.config_hash(), reseeded.config_hash());

        let mut retuned = base.clone();
        retuned.recon.gauss_fwhm = 5.0;
        assert_ne!(base.config_hash(), retuned.config_hash());
    }

    #[test]
    fn output_dir_resolves_against_config_location() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "output_dir = \"artifacts\"\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.resolved_output_dir(), dir.path().join("artifacts"));
        // The hash is location independent.
        assert_eq!(
            cfg.config_hash(),
            parse_config("output_dir = \"artifacts\"").unwrap().config_hash()
        );
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = parse_config("[recon.mlem]\niterations = 30\nsnapshots = [10, 30]\n").unwrap();
        assert_eq!(cfg.recon.mlem.iterations, 30);
        assert_eq!(cfg.recon.mapem, MapemConfig::default());
        assert_eq!(cfg.seed, 7);
    }
}
