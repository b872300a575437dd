//! Supervised training loop for the denoising network.
//!
//! Samples are (multi-slice noisy window, clean centre slice) pairs; the
//! loss is mean squared error over the batch. Augmentation (the eight
//! square symmetries plus small integer shifts) is applied on the fly so
//! the stored training set stays small. All randomness is derived from
//! the run seed, so training is bit-reproducible.

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::network::{volume_to_windows, NetworkWeights};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::derive_rng_indexed;
use crate::volume::ActivityVolume;

/// One training sample: `c*h*w` input window, `h*w` target slice.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub input: Vec<f64>,
    pub label: Vec<f64>,
}

/// Split a (noisy, clean) volume pair into per-slice training samples.
pub fn pairs_from_volumes(
    noisy: &ActivityVolume,
    clean: &ActivityVolume,
    in_channels: usize,
) -> Result<Vec<SlicePair>> {
    if noisy.grid != clean.grid {
        return Err(Error::Dimension("training volume grids differ".into()));
    }
    let g = noisy.grid;
    let windows = volume_to_windows(noisy, in_channels);
    Ok((0..g.nz)
        .map(|k| SlicePair {
            c: in_channels,
            h: g.ny,
            w: g.nx,
            input: (0..in_channels)
                .flat_map(|c| windows.plane(k, c).iter().copied())
                .collect(),
            label: clean.slice(k).to_vec(),
        })
        .collect())
}

/// Training hyperparameters; part of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Running-statistics update weight on the previous value.
    pub bn_momentum: f64,
    /// Apply random symmetries and shifts to each sample every epoch.
    pub augment: bool,
    /// Maximum augmentation shift in voxels along each axis.
    pub max_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bn_momentum: 0.9,
            augment: true,
            max_shift: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "training.epochs and training.batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("bn_momentum", self.bn_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("training.{name} must be in [0,1): got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-epoch mean training loss, in epoch order.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
}

/// A spatial transform shared by every channel of a sample: a rotation
/// and mirror (one of the eight square symmetries) followed by an integer
/// shift with zero fill.
#[derive(Debug, Clone, Copy)]
struct Augment {
    rot: u8,
    flip: bool,
    dy: isize,
    dx: isize,
}

impl Augment {
    const IDENTITY: Augment = Augment {
        rot: 0,
        flip: false,
        dy: 0,
        dx: 0,
    };

    fn sample(rng: &mut impl rand::Rng, h: usize, w: usize, max_shift: usize) -> Augment {
        // Quarter turns need square planes; otherwise only half turns.
        let rot = if h == w {
            rng.gen_range(0u8..4)
        } else {
            2 * rng.gen_range(0u8..2)
        };
        let s = max_shift as isize;
        Augment {
            rot,
            flip: rng.gen(),
            dy: rng.gen_range(-s..=s),
            dx: rng.gen_range(-s..=s),
        }
    }

    /// Write the transformed plane into `dst` (both `h*w`).
    fn apply(&self, src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
        debug_assert_eq!(src.len(), h * w);
        debug_assert_eq!(dst.len(), h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (y1, x1) = (y - self.dy, x - self.dx);
                let out = &mut dst[(y * w as isize + x) as usize];
                if y1 < 0 || y1 >= h as isize || x1 < 0 || x1 >= w as isize {
                    *out = 0.0;
                    continue;
                }
                let x2 = if self.flip { w as isize - 1 - x1 } else { x1 };
                let (sy, sx) = match self.rot {
                    0 => (y1, x2),
                    1 => (x2, h as isize - 1 - y1),
                    2 => (h as isize - 1 - y1, w as isize - 1 - x2),
                    _ => (w as isize - 1 - x2, y1),
                };
                *out = src[(sy * w as isize + sx) as usize];
            }
        }
    }
}

/// Train `net` in place; returns the per-epoch loss history.
pub fn train(
    net: &mut NetworkWeights,
    pairs: &[SlicePair],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (c, h, w) = (pairs[0].c, pairs[0].h, pairs[0].w);
    if c != net.config.in_channels {
        return Err(Error::Dimension(format!(
            "training pairs have {c} channels, network expects {}",
            net.config.in_channels
        )));
    }
    for p in pairs {
        if (p.c, p.h, p.w) != (c, h, w) || p.input.len() != c * h * w || p.label.len() != h * w {
            return Err(Error::Dimension("inconsistent training pair shapes".into()));
        }
    }

    let mut adam = AdamState::new(net, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = derive_rng_indexed(seed, "train-shuffle", epoch as u64);
        shuffle(&mut order, &mut shuffle_rng);
        let mut aug_rng = derive_rng_indexed(seed, "train-augment", epoch as u64);

        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut x = Tensor::zeros(n, c, h, w);
            let mut label = Tensor::zeros(n, 1, h, w);
            for (bi, &pi) in chunk.iter().enumerate() {
                let p = &pairs[pi];
                let aug = if cfg.augment {
                    Augment::sample(&mut aug_rng, h, w, cfg.max_shift)
                } else {
                    Augment::IDENTITY
                };
                for ci in 0..c {
                    aug.apply(&p.input[ci * h * w..(ci + 1) * h * w], h, w, x.plane_mut(bi, ci));
                }
                aug.apply(&p.label, h, w, label.plane_mut(bi, 0));
            }

            let (pred, caches) = net.forward_train(&x, cfg.bn_momentum)?;
            let numel = pred.data.len() as f64;
            let mut gy = Tensor::zeros(n, 1, h, w);
            let mut batch_loss = 0.0;
            for i in 0..pred.data.len() {
                let d = pred.data[i] - label.data[i];
                batch_loss += d * d;
                gy.data[i] = 2.0 * d / numel;
            }
            batch_loss /= numel;
            let (grads, _) = net.backward(&caches, &gy);
            adam.step(net, &grads, cfg.learning_rate);

            loss_sum += batch_loss * n as f64;
            n_seen += n;
        }
        epoch_losses.push(loss_sum / n_seen as f64);
    }

    Ok(TrainReport {
        epoch_losses,
        samples: pairs.len(),
    })
}

/// Fisher-Yates with the given generator.
fn shuffle(order: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::NetworkConfig;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn toy_pairs(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<SlicePair> {
        // Label = smooth bump; input = label window plus noise.
        let mut rng = derive_rng(seed, "toy-pairs");
        (0..n)
            .map(|_| {
                let cy = rng.gen_range(2.0..h as f64 - 2.0);
                let cx = rng.gen_range(2.0..w as f64 - 2.0);
                let label: Vec<f64> = (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        (-((y - cy).powi(2) + (x - cx).powi(2)) / 8.0).exp()
                    })
                    .collect();
                let mut input = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    input.extend(label.iter().map(|&v| v + 0.3 * (rng.gen::<f64>() - 0.5)));
                }
                SlicePair {
                    c,
                    h,
                    w,
                    input,
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn loss_decreases_on_toy_denoising_problem() {
        let cfg = NetworkConfig {
            in_channels: 3,
            channels: vec![3, 4],
            kernel: 3,
        };
        let mut rng = derive_rng(60, "train-init");
        let mut net = NetworkWeights::init_he(&cfg, &mut rng).unwrap();
        let pairs = toy_pairs(12, 3, 8, 8, 61);
        let tc = TrainConfig {
            epochs: 25,
            batch_size: 4,
            augment: false,
            ..Default::default()
        };
        let report = train(&mut net, &pairs, &tc, 62).unwrap();
        assert_eq!(report.epoch_losses.len(), 25);
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(
            last < 0.5 * first,
            "training failed to reduce loss: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = NetworkConfig {
            in_channels: 3,
            channels: vec![2, 3],
            kernel: 3,
        };
        let pairs = toy_pairs(6, 3, 8, 8, 63);
        let run = || {
            let mut rng = derive_rng(64, "det-init");
            let mut net = NetworkWeights::init_he(&cfg, &mut rng).unwrap();
            let tc = TrainConfig {
                epochs: 3,
                batch_size: 4,
                ..Default::default()
            };
            let report = train(&mut net, &pairs, &tc, 65).unwrap();
            let mut flat = Vec::new();
            net.visit_params_mut(&mut |p: &mut Vec<f64>| flat.extend_from_slice(p));
            (report.epoch_losses, flat)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn augmentation_keeps_input_and_label_aligned() {
        // If the label equals the centre input channel, any shared
        // transform must preserve that equality.
        let h = 8;
        let w = 8;
        let mut rng = derive_rng(66, "aug-align");
        let plane: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        for trial in 0..50 {
            let mut r = derive_rng(67, &format!("aug-{trial}"));
            let aug = Augment::sample(&mut r, h, w, 4);
            let mut a = vec![0.0; h * w];
            let mut b = vec![0.0; h * w];
            aug.apply(&plane, h, w, &mut a);
            aug.apply(&plane, h, w, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn augmentation_symmetries_are_mass_preserving_without_shift() {
        let h = 6;
        let w = 6;
        let plane: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let total: f64 = plane.iter().sum();
        for rot in 0..4u8 {
            for flip in [false, true] {
                let aug = Augment {
                    rot,
                    flip,
                    dy: 0,
                    dx: 0,
                };
                let mut out = vec![0.0; h * w];
                aug.apply(&plane, h, w, &mut out);
                let got: f64 = out.iter().sum();
                assert_eq!(got, total, "rot {rot} flip {flip} lost mass");
                // Bijection: sorted values identical.
                let mut a = plane.clone();
                let mut b = out.clone();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn quarter_turn_matches_manual_rotation() {
        // 2x2 plane [0 1; 2 3], 90 degrees counter-clockwise -> [1 3; 0 2].
        let plane = vec![0.0, 1.0, 2.0, 3.0];
        let aug = Augment {
            rot: 1,
            flip: false,
            dy: 0,
            dx: 0,
        };
        let mut out = vec![0.0; 4];
        aug.apply(&plane, 2, 2, &mut out);
        assert_eq!(out, vec![1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn shift_zero_fills_and_moves_content() {
        let h = 4;
        let w = 4;
        let mut plane = vec![0.0; 16];
        plane[5] = 7.0; // (y=1, x=1)
        let aug = Augment {
            rot: 0,
            flip: false,
            dy: 1,
            dx: 2,
        };
        let mut out = vec![0.0; 16];
        aug.apply(&plane, h, w, &mut out);
        assert_eq!(out[2 * w + 3], 7.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn pairs_from_volumes_checks_grids() {
        use crate::volume::{ActivityVolume, ImageGrid};
        let g1 = ImageGrid {
            nx: 4,
            ny: 4,
            nz: 2,
            voxel_size: 1.0,
        };
        let g2 = ImageGrid { nz: 3, ..g1 };
        let a = ActivityVolume::zeros(g1);
        let b = ActivityVolume::zeros(g2);
        assert!(pairs_from_volumes(&a, &b, 3).is_err());
        let c = ActivityVolume::zeros(g1);
        let pairs = pairs_from_volumes(&a, &c, 3).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].input.len(), 3 * 16);
        assert_eq!(pairs[0].label.len(), 16);
    }

    #[test]
    fn rejects_bad_configs_and_shapes() {
        let cfg = NetworkConfig {
            in_channels: 3,
            channels: vec![2],
            kernel: 3,
        };
        let mut net = NetworkWeights::zeros(&cfg).unwrap();
        let pairs = toy_pairs(2, 3, 8, 8, 70);
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&mut net, &pairs, &bad, 0).is_err());
        assert!(train(&mut net, &[], &TrainConfig::default(), 0).is_err());
        let wrong_c = toy_pairs(2, 5, 8, 8, 71);
        assert!(train(&mut net, &wrong_c, &TrainConfig::default(), 0).is_err());
    }
}
