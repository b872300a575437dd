//! Ellipsoid phantoms with per-tissue compartment kinetics.
//!
//! A phantom is a list of labelled ellipsoids painted in order (later organs
//! overwrite earlier ones) plus optional spherical lesions painted last.
//! Tissue kinetics come from a table of population means; per-phantom
//! variation draws every rate constant from a truncated Gaussian around its
//! mean. Activity images are the frame averages of the resulting
//! time-activity curves.

pub mod kinetics;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;
use crate::volume::{ActivityVolume, ImageGrid, LabelVolume};
use kinetics::{frame_mean_activity, InputFunctionParams, KineticParams};

/// Label painted over lesion voxels; organ labels must stay below it.
pub const LESION_LABEL: u32 = 100;
/// Tissue name assigned to lesions.
pub const LESION_TISSUE: &str = "lung_lesion";

/// Population mean kinetics per tissue.
///
/// The entry order is fixed so iteration (and thus every derived artifact)
/// is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueTable {
    entries: Vec<(String, KineticParams)>,
}

impl TissueTable {
    /// Mean parameters for the standard tissue set.
    pub fn means() -> TissueTable {
        let k = |k1, k2, k3, k4, v| KineticParams { k1, k2, k3, k4, v };
        TissueTable {
            entries: vec![
                ("air".into(), KineticParams::ZERO),
                ("blood".into(), k(0.0, 0.0, 0.0, 0.0, 1.0)),
                ("myocardium".into(), k(0.6, 1.2, 0.1, 0.001, 0.0)),
                ("liver".into(), k(0.864, 0.981, 0.005, 0.016, 0.0)),
                ("lung".into(), k(0.108, 0.735, 0.016, 0.013, 0.017)),
                ("kidney".into(), k(0.263, 0.299, 0.0, 0.0, 0.438)),
                ("spleen".into(), k(1.207, 1.909, 0.008, 0.014, 0.0)),
                ("pancreas".into(), k(0.648, 1.64, 0.027, 0.016, 0.107)),
                ("soft_tissue".into(), k(0.047, 0.325, 0.084, 0.0, 0.019)),
                ("marrow".into(), k(0.425, 1.055, 0.023, 0.013, 0.04)),
                (LESION_TISSUE.into(), k(0.63, 0.842, 0.092, 0.014, 0.132)),
            ],
        }
    }

    pub fn get(&self, tissue: &str) -> Option<&KineticParams> {
        self.entries
            .iter()
            .find(|(name, _)| name == tissue)
            .map(|(_, k)| k)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(name, _)| name.as_str())
    }

    /// Draw a per-phantom table: every rate constant from a Gaussian with
    /// standard deviation `cv * mean`, truncated at zero by redrawing; the
    /// blood volume fraction is additionally truncated at one. Parameters
    /// with zero mean stay exactly zero.
    pub fn sampled(&self, cv: f64, rng: &mut ChaCha8Rng) -> Result<TissueTable> {
        if !(0.0..1.0).contains(&cv) {
            return Err(Error::Config(format!(
                "phantom.cv must be in [0, 1): got {cv}"
            )));
        }
        let entries = self
            .entries
            .iter()
            .map(|(name, k)| {
                let s = |mean: f64, hi: f64, rng: &mut ChaCha8Rng| {
                    truncated_gaussian(mean, cv * mean, 0.0, hi, rng)
                };
                let sampled = KineticParams {
                    k1: s(k.k1, f64::INFINITY, rng),
                    k2: s(k.k2, f64::INFINITY, rng),
                    k3: s(k.k3, f64::INFINITY, rng),
                    k4: s(k.k4, f64::INFINITY, rng),
                    v: s(k.v, 1.0, rng),
                };
                (name.clone(), sampled)
            })
            .collect();
        Ok(TissueTable { entries })
    }
}

/// One draw from a Gaussian truncated to `[lo, hi]` by rejection.
fn truncated_gaussian(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(mean, sd).expect("finite mean/sd");
    // The truncation bounds are many standard deviations away from the mean
    // for every tissue in the table, so this terminates almost immediately.
    for _ in 0..10_000 {
        let x = normal.sample(rng);
        if x >= lo && x <= hi {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

/// An ellipsoid organ: centre and semi-axes in mm, grid centred on origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub label: u32,
    pub tissue: String,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

/// A spherical lesion: centre in mm and diameter in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub diameter: f64,
}

/// Geometry of one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub organs: Vec<OrganSpec>,
    pub lesions: Vec<LesionSpec>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut labels: Vec<u32> = Vec::new();
        for organ in &self.organs {
            if organ.label == 0 {
                return Err(Error::Config(format!(
                    "organ '{}' uses label 0, which is reserved for air",
                    organ.tissue
                )));
            }
            if organ.label >= LESION_LABEL {
                return Err(Error::Config(format!(
                    "organ '{}' uses label {} >= lesion label {LESION_LABEL}",
                    organ.tissue, organ.label
                )));
            }
            if labels.contains(&organ.label) {
                return Err(Error::Config(format!(
                    "duplicate organ label {}",
                    organ.label
                )));
            }
            if organ.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!(
                    "organ '{}' has non-positive semi-axis",
                    organ.tissue
                )));
            }
            labels.push(organ.label);
        }
        for lesion in &self.lesions {
            if !(lesion.diameter > 0.0) {
                return Err(Error::Config("lesion diameter must be positive".into()));
            }
        }
        Ok(())
    }

    /// Paint the phantom onto a grid. Organs are painted in declaration
    /// order, lesions last under [`LESION_LABEL`]; a voxel belongs to the
    /// last shape whose ellipsoid contains its centre.
    pub fn rasterize(&self, grid: &ImageGrid) -> Result<LabelVolume> {
        self.validate()?;
        grid.validate()?;
        let mut labels = vec![0u32; grid.len()];
        for organ in &self.organs {
            paint_ellipsoid(grid, &mut labels, organ.center, organ.semi_axes, organ.label);
        }
        for lesion in &self.lesions {
            let r = lesion.diameter / 2.0;
            paint_ellipsoid(grid, &mut labels, lesion.center, [r, r, r], LESION_LABEL);
        }
        let mut tissue_of: Vec<(u32, String)> = vec![(0, "air".into())];
        for organ in &self.organs {
            tissue_of.push((organ.label, organ.tissue.clone()));
        }
        if !self.lesions.is_empty() {
            tissue_of.push((LESION_LABEL, LESION_TISSUE.into()));
        }
        tissue_of.sort_by_key(|(l, _)| *l);
        Ok(LabelVolume {
            grid: *grid,
            labels,
            tissue_of,
        })
    }

    /// The same phantom with all lesions removed.
    pub fn without_lesions(&self) -> PhantomSpec {
        PhantomSpec {
            organs: self.organs.clone(),
            lesions: Vec::new(),
        }
    }
}

fn paint_ellipsoid(
    grid: &ImageGrid,
    labels: &mut [u32],
    center: [f64; 3],
    semi_axes: [f64; 3],
    label: u32,
) {
    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let c = grid.voxel_center(ix, iy, iz);
                let mut q = 0.0;
                for a in 0..3 {
                    let d = (c[a] - center[a]) / semi_axes[a];
                    q += d * d;
                }
                if q <= 1.0 {
                    labels[grid.index(ix, iy, iz)] = label;
                }
            }
        }
    }
}

/// Standard torso-like organ layout used by the pipeline. With
/// `jitter > 0`, semi-axes are scaled by `1 + U(-jitter, jitter)` per axis
/// and centres shifted by up to one voxel-ish amount, drawn from `rng`.
pub fn standard_phantom(jitter: f64, rng: Option<&mut ChaCha8Rng>) -> PhantomSpec {
    let mut organs = vec![
        OrganSpec {
            label: 1,
            tissue: "soft_tissue".into(),
            center: [0.0, 0.0, 0.0],
            semi_axes: [115.0, 90.0, 60.0],
        },
        OrganSpec {
            label: 2,
            tissue: "lung".into(),
            center: [-48.0, 22.0, 0.0],
            semi_axes: [34.0, 42.0, 60.0],
        },
        OrganSpec {
            label: 3,
            tissue: "lung".into(),
            center: [48.0, 22.0, 0.0],
            semi_axes: [34.0, 42.0, 60.0],
        },
        OrganSpec {
            label: 4,
            tissue: "liver".into(),
            center: [38.0, -38.0, 0.0],
            semi_axes: [44.0, 30.0, 50.0],
        },
        OrganSpec {
            label: 5,
            tissue: "spleen".into(),
            center: [-58.0, -40.0, 0.0],
            semi_axes: [18.0, 16.0, 36.0],
        },
        OrganSpec {
            label: 6,
            tissue: "pancreas".into(),
            center: [-8.0, -32.0, 0.0],
            semi_axes: [26.0, 10.0, 24.0],
        },
        OrganSpec {
            label: 7,
            tissue: "kidney".into(),
            center: [-26.0, -62.0, 0.0],
            semi_axes: [13.0, 17.0, 30.0],
        },
        OrganSpec {
            label: 8,
            tissue: "marrow".into(),
            center: [0.0, -78.0, 0.0],
            semi_axes: [10.0, 10.0, 60.0],
        },
        OrganSpec {
            label: 9,
            tissue: "myocardium".into(),
            center: [6.0, 16.0, 0.0],
            semi_axes: [26.0, 26.0, 24.0],
        },
        OrganSpec {
            label: 10,
            tissue: "blood".into(),
            center: [6.0, 16.0, 0.0],
            semi_axes: [13.0, 13.0, 12.0],
        },
    ];
    if let Some(rng) = rng {
        for organ in &mut organs {
            for a in 0..3 {
                let scale = 1.0 + jitter * (2.0 * rng.gen::<f64>() - 1.0);
                organ.semi_axes[a] *= scale;
                organ.center[a] += 4.0 * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
    }
    PhantomSpec {
        organs,
        lesions: Vec::new(),
    }
}

/// Lesion layout for the evaluation phantom: two lung spheres.
pub fn standard_lesions() -> Vec<LesionSpec> {
    vec![
        LesionSpec {
            center: [-48.0, 30.0, 0.0],
            diameter: 16.0,
        },
        LesionSpec {
            center: [50.0, 14.0, 2.0],
            diameter: 20.8,
        },
    ]
}

/// Hot spheres inserted into a training phantom: one or two per phantom
/// with diameters uniform in [12.8, 22.4] mm, each centred in a randomly
/// chosen lung. The centre stays within half of the lung's semi-axes
/// laterally and within the imaged slab minus the sphere radius axially,
/// so every training lesion is fully visible on the grid.
pub fn random_lesions(
    organs: &[OrganSpec],
    grid: &ImageGrid,
    rng: &mut ChaCha8Rng,
) -> Vec<LesionSpec> {
    let lungs: Vec<&OrganSpec> = organs.iter().filter(|o| o.tissue == "lung").collect();
    if lungs.is_empty() {
        return Vec::new();
    }
    let z_half = 0.5 * grid.nz as f64 * grid.voxel_size;
    let n = if rng.gen::<f64>() < 2.0 / 3.0 { 2 } else { 1 };
    (0..n)
        .map(|_| {
            let lung = lungs[rng.gen_range(0..lungs.len())];
            let diameter = rng.gen_range(12.8..22.4);
            let r = diameter / 2.0;
            let mut center = [0.0; 3];
            for a in 0..2 {
                let u = 2.0 * rng.gen::<f64>() - 1.0;
                center[a] = lung.center[a] + 0.5 * u * lung.semi_axes[a];
            }
            let z_lo = (lung.center[2] - 0.5 * lung.semi_axes[2]).max(r - z_half);
            let z_hi = (lung.center[2] + 0.5 * lung.semi_axes[2]).min(z_half - r);
            center[2] = if z_lo < z_hi {
                rng.gen_range(z_lo..z_hi)
            } else {
                0.0
            };
            LesionSpec { center, diameter }
        })
        .collect()
}

/// The phantom used for training sample `index`; organ geometry, inserted
/// lesions, and kinetics all vary per index but are fully determined by
/// `(master_seed, index)`.
pub fn training_phantom(
    master_seed: u64,
    index: u64,
    jitter: f64,
    cv: f64,
    grid: &ImageGrid,
) -> Result<(PhantomSpec, TissueTable)> {
    let mut rng = derive_rng_indexed(master_seed, "phantom-train", index);
    let mut spec = standard_phantom(jitter, Some(&mut rng));
    spec.lesions = random_lesions(&spec.organs, grid, &mut rng);
    let table = TissueTable::means().sampled(cv, &mut rng)?;
    Ok((spec, table))
}

/// The held-out evaluation phantom: mean geometry and kinetics, plus lesions.
pub fn test_phantom() -> (PhantomSpec, TissueTable) {
    let mut spec = standard_phantom(0.0, None);
    spec.lesions = standard_lesions();
    (spec, TissueTable::means())
}

/// Frame-averaged activity image for a labelled phantom.
pub fn frame_activity(
    labels: &LabelVolume,
    table: &TissueTable,
    input: &InputFunctionParams,
    t_start: f64,
    t_end: f64,
    ode_step: f64,
) -> Result<ActivityVolume> {
    let mut activity_of: Vec<(u32, f64)> = Vec::new();
    for (label, tissue) in &labels.tissue_of {
        let k = table.get(tissue).ok_or_else(|| {
            Error::Config(format!("phantom references unknown tissue '{tissue}'"))
        })?;
        let a = frame_mean_activity(k, input, ode_step, t_start, t_end)?;
        activity_of.push((*label, a));
    }
    let mut values = vec![0.0; labels.grid.len()];
    for (i, lab) in labels.labels.iter().enumerate() {
        let a = activity_of
            .iter()
            .find(|(l, _)| l == lab)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Config(format!("voxel carries unmapped label {lab}")))?;
        values[i] = a;
    }
    ActivityVolume::from_values(labels.grid, values)
}
