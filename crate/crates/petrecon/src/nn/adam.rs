//! Adam optimizer with standard bias correction.

use super::network::{NetworkGrads, NetworkWeights};

/// First/second moment accumulators, one pair of buffers per parameter
/// vector in the canonical network order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Completed steps (bias correction uses t+1 internally).
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &NetworkWeights, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        let mut sizes = Vec::new();
        let mut probe = net.clone();
        probe.visit_params_mut(&mut |p: &mut Vec<f64>| sizes.push(p.len()));
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, net: &mut NetworkWeights, grads: &NetworkGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        // flat() and visit_params_mut traverse the same canonical order;
        // zip by running index.
        let flat = grads.flat();
        let mut slot = 0usize;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params_mut(&mut |p: &mut Vec<f64>| {
            let g = flat[slot];
            let m = &mut ms[slot];
            let v = &mut vs[slot];
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot += 1;
        });
        assert_eq!(slot, flat.len(), "gradient slots not exhausted");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{NetworkConfig, NetworkGrads, NetworkWeights};
    use crate::rng::derive_rng;

    fn small_net() -> NetworkWeights {
        let cfg = NetworkConfig {
            in_channels: 3,
            channels: vec![2, 3],
            kernel: 3,
        };
        let mut rng = derive_rng(50, "adam-init");
        NetworkWeights::init_he(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn first_step_moves_each_param_by_lr_against_gradient_sign() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut net = small_net();
        let before = net.clone();
        let mut grads = NetworkGrads::zeros_like(&net);
        let mut rng = derive_rng(51, "adam-g");
        for b in &mut grads.blocks {
            for g in b
                .gw
                .iter_mut()
                .chain(b.gb.iter_mut())
                .chain(b.ggamma.iter_mut())
                .chain(b.gbeta.iter_mut())
            {
                *g = if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 };
            }
        }
        let lr = 1e-3;
        let mut adam = AdamState::new(&net, 0.9, 0.999, 1e-8);
        adam.step(&mut net, &grads, lr);

        let mut before_flat = Vec::new();
        let mut b = before.clone();
        b.visit_params_mut(&mut |p: &mut Vec<f64>| before_flat.push(p.clone()));
        let mut after_flat = Vec::new();
        net.visit_params_mut(&mut |p: &mut Vec<f64>| after_flat.push(p.clone()));
        let mut g_flat = Vec::new();
        grads.visit(&mut |g: &[f64]| g_flat.push(g.to_vec()));

        for ((pb, pa), g) in before_flat.iter().zip(&after_flat).zip(&g_flat) {
            for ((&b0, &a0), &g0) in pb.iter().zip(pa).zip(g) {
                let delta = a0 - b0;
                let expect = -lr * g0.signum();
                assert!(
                    (delta - expect).abs() < lr * 1e-4,
                    "delta {delta} vs {expect} (g={g0})"
                );
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = small_net();
        let before = net.clone();
        let grads = NetworkGrads::zeros_like(&net);
        let mut adam = AdamState::new(&net, 0.9, 0.999, 1e-8);
        adam.step(&mut net, &grads, 1e-3);
        assert_eq!(net, before);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut net = small_net();
            let mut grads = NetworkGrads::zeros_like(&net);
            for b in &mut grads.blocks {
                for (i, g) in b.gw.iter_mut().enumerate() {
                    *g = (i as f64 * 0.37).sin();
                }
            }
            let mut adam = AdamState::new(&net, 0.9, 0.999, 1e-8);
            for _ in 0..5 {
                adam.step(&mut net, &grads, 1e-3);
            }
            let mut flat = Vec::new();
            net.visit_params_mut(&mut |p: &mut Vec<f64>| flat.extend_from_slice(p));
            flat
        };
        assert_eq!(run(), run());
    }
}
