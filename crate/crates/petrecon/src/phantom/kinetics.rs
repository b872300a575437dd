//! Tracer kinetics: arterial input function and two-tissue compartment model.
//!
//! Time is in minutes, concentrations in arbitrary activity units. The
//! tissue time-activity curve is
//!
//! ```text
//! dCf/dt = K1*Cp(t) - (k2 + k3)*Cf + k4*Cb
//! dCb/dt = k3*Cf - k4*Cb
//! CT(t)  = (1 - V)*(Cf + Cb) + V*Cp(t)
//! ```
//!
//! with fractional blood volume `V`. The system is integrated with classic
//! fixed-step RK4 together with an accumulator state `dA/dt = CT`, so frame
//! averages are exact integrals of the same numerical solution and adjacent
//! frames add up exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blood input curve `Cp(t) = (a1*t - a2 - a3)e^{-l1 t} + a2 e^{-l2 t} + a3 e^{-l3 t}`,
/// clamped at zero. Rate constants are per minute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputFunctionParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for InputFunctionParams {
    fn default() -> Self {
        InputFunctionParams {
            a1: 851.1225,
            a2: 21.8798,
            a3: 20.8113,
            lambda1: 4.133859,
            lambda2: 0.01043449,
            lambda3: 0.1190996,
        }
    }
}

/// Blood concentration at time `t` minutes.
pub fn blood_input(t: f64, p: &InputFunctionParams) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!(
            "blood input time must be finite and non-negative: got {t}"
        )));
    }
    let v = (p.a1 * t - p.a2 - p.a3) * (-p.lambda1 * t).exp()
        + p.a2 * (-p.lambda2 * t).exp()
        + p.a3 * (-p.lambda3 * t).exp();
    Ok(v.max(0.0))
}

/// Two-tissue compartment rate constants plus fractional blood volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub v: f64,
}

impl KineticParams {
    pub const ZERO: KineticParams = KineticParams {
        k1: 0.0,
        k2: 0.0,
        k3: 0.0,
        k4: 0.0,
        v: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.k1, self.k2, self.k3, self.k4, self.v];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Domain(format!(
                "kinetic parameters must be finite and non-negative: {self:?}"
            )));
        }
        if self.v > 1.0 {
            return Err(Error::Domain(format!(
                "fractional blood volume must be at most 1: got {}",
                self.v
            )));
        }
        Ok(())
    }
}

/// Compartment states and the running integral of the total concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueState {
    pub c_free: f64,
    pub c_bound: f64,
    /// Integral of `CT` from time zero.
    pub integrated_total: f64,
}

impl TissueState {
    /// Total tissue concentration at time `t` for this state.
    pub fn total(&self, t: f64, k: &KineticParams, input: &InputFunctionParams) -> Result<f64> {
        let cp = blood_input(t, input)?;
        Ok((1.0 - k.v) * (self.c_free + self.c_bound) + k.v * cp)
    }
}

fn derivative(
    t: f64,
    state: [f64; 3],
    k: &KineticParams,
    input: &InputFunctionParams,
) -> Result<[f64; 3]> {
    let cp = blood_input(t, input)?;
    let [cf, cb, _] = state;
    Ok([
        k.k1 * cp - (k.k2 + k.k3) * cf + k.k4 * cb,
        k.k3 * cf - k.k4 * cb,
        (1.0 - k.v) * (cf + cb) + k.v * cp,
    ])
}

/// Integrate the compartment system from zero and report the state at each
/// requested time. `times` must be sorted ascending and non-negative.
///
/// Each span between consecutive report times is covered with equal RK4
/// steps no longer than `step`, so report times are hit exactly.
pub fn tissue_states(
    k: &KineticParams,
    input: &InputFunctionParams,
    step: f64,
    times: &[f64],
) -> Result<Vec<TissueState>> {
    k.validate()?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!(
            "integration step must be positive and finite: got {step}"
        )));
    }
    let mut prev = 0.0;
    for &t in times {
        if !t.is_finite() || t < prev {
            return Err(Error::Domain(
                "report times must be sorted, finite and non-negative".into(),
            ));
        }
        prev = t;
    }

    let mut out = Vec::with_capacity(times.len());
    let mut state = [0.0f64; 3];
    let mut t_cur = 0.0;
    for &t_target in times {
        let span = t_target - t_cur;
        if span > 0.0 {
            let n_steps = (span / step).ceil() as usize;
            let h = span / n_steps as f64;
            for i in 0..n_steps {
                let t = t_cur + i as f64 * h;
                let k1 = derivative(t, state, k, input)?;
                let s2 = add_scaled(state, k1, h / 2.0);
                let k2 = derivative(t + h / 2.0, s2, k, input)?;
                let s3 = add_scaled(state, k2, h / 2.0);
                let k3 = derivative(t + h / 2.0, s3, k, input)?;
                let s4 = add_scaled(state, k3, h);
                let k4 = derivative(t + h, s4, k, input)?;
                for d in 0..3 {
                    state[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
                }
            }
            t_cur = t_target;
        }
        out.push(TissueState {
            c_free: state[0],
            c_bound: state[1],
            integrated_total: state[2],
        });
    }
    Ok(out)
}

/// Mean total concentration over the frame `[t_start, t_end]`.
pub fn frame_mean_activity(
    k: &KineticParams,
    input: &InputFunctionParams,
    step: f64,
    t_start: f64,
    t_end: f64,
) -> Result<f64> {
    if !(t_end > t_start) {
        return Err(Error::Domain(format!(
            "frame end {t_end} must be after frame start {t_start}"
        )));
    }
    let states = tissue_states(k, input, step, &[t_start, t_end])?;
    let integral = states[1].integrated_total - states[0].integrated_total;
    // RK4 can undershoot by rounding; activities are physically non-negative.
    Ok((integral / (t_end - t_start)).max(0.0))
}

fn add_scaled(s: [f64; 3], d: [f64; 3], h: f64) -> [f64; 3] {
    [s[0] + h * d[0], s[1] + h * d[1], s[2] + h * d[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form solution pieces for the irreversible case `k4 = 0`,
    /// driven by the unclamped three-exponential input. Used as an
    /// independent oracle for the RK4 integrator.
    mod oracle {
        use super::InputFunctionParams;

        /// `E(l, a, t) = int_0^t e^{-a(t-u)} e^{-l u} du`
        pub fn conv_exp(l: f64, a: f64, t: f64) -> f64 {
            ((-l * t).exp() - (-a * t).exp()) / (a - l)
        }

        /// `T(l, a, t) = int_0^t e^{-a(t-u)} u e^{-l u} du`
        pub fn conv_ramp(l: f64, a: f64, t: f64) -> f64 {
            let b = a - l;
            t * (-l * t).exp() / b - (-l * t).exp() / (b * b) + (-a * t).exp() / (b * b)
        }

        /// `int_0^t E(l, a, u) du`
        pub fn int_conv_exp(l: f64, a: f64, t: f64) -> f64 {
            ((1.0 - (-l * t).exp()) / l - (1.0 - (-a * t).exp()) / a) / (a - l)
        }

        /// `int_0^t T(l, a, u) du`
        pub fn int_conv_ramp(l: f64, a: f64, t: f64) -> f64 {
            let b = a - l;
            (1.0 - (1.0 + l * t) * (-l * t).exp()) / (l * l) / b
                - (1.0 - (-l * t).exp()) / l / (b * b)
                + (1.0 - (-a * t).exp()) / a / (b * b)
        }

        /// Free compartment for `k4 = 0`: `Cf = K1 * (Cp conv e^{-a t})`,
        /// `a = k2 + k3`.
        pub fn c_free(k1: f64, a: f64, p: &InputFunctionParams, t: f64) -> f64 {
            k1 * (p.a1 * conv_ramp(p.lambda1, a, t) - (p.a2 + p.a3) * conv_exp(p.lambda1, a, t)
                + p.a2 * conv_exp(p.lambda2, a, t)
                + p.a3 * conv_exp(p.lambda3, a, t))
        }

        /// `int_0^t Cf du` for `k4 = 0`.
        pub fn int_c_free(k1: f64, a: f64, p: &InputFunctionParams, t: f64) -> f64 {
            k1 * (p.a1 * int_conv_ramp(p.lambda1, a, t)
                - (p.a2 + p.a3) * int_conv_exp(p.lambda1, a, t)
                + p.a2 * int_conv_exp(p.lambda2, a, t)
                + p.a3 * int_conv_exp(p.lambda3, a, t))
        }

        /// Bound compartment for `k4 = 0`: `Cb = k3 * int_0^t Cf`.
        pub fn c_bound(k1: f64, k2: f64, k3: f64, p: &InputFunctionParams, t: f64) -> f64 {
            k3 * int_c_free(k1, k2 + k3, p, t)
        }

        /// `int_0^t Cp du` (unclamped input).
        pub fn int_input(p: &InputFunctionParams, t: f64) -> f64 {
            let l1 = p.lambda1;
            let int_ramp = (1.0 - (1.0 + l1 * t) * (-l1 * t).exp()) / (l1 * l1);
            let int_e = |l: f64| (1.0 - (-l * t).exp()) / l;
            p.a1 * int_ramp - (p.a2 + p.a3) * int_e(l1)
                + p.a2 * int_e(p.lambda2)
                + p.a3 * int_e(p.lambda3)
        }
    }

    const STEP: f64 = 0.01;

    #[test]
    fn input_starts_at_zero_and_stays_non_negative() {
        let p = InputFunctionParams::default();
        assert_eq!(blood_input(0.0, &p).unwrap(), 0.0);
        let mut t = 0.0;
        while t <= 90.0 {
            assert!(blood_input(t, &p).unwrap() >= 0.0);
            t += 0.05;
        }
        assert!(blood_input(-1.0, &p).is_err());
    }

    #[test]
    fn default_input_is_never_clamped() {
        // The closed-form oracle uses the unclamped expression; make sure
        // clamping is inactive for the default parameters.
        let p = InputFunctionParams::default();
        let mut t = 1e-9;
        while t <= 90.0 {
            let raw = (p.a1 * t - p.a2 - p.a3) * (-p.lambda1 * t).exp()
                + p.a2 * (-p.lambda2 * t).exp()
                + p.a3 * (-p.lambda3 * t).exp();
            assert!(raw >= 0.0, "input went negative at t={t}: {raw}");
            t += 0.01;
        }
    }

    #[test]
    fn oracle_free_compartment_satisfies_ode() {
        // Self-check of the closed form: central finite difference of the
        // oracle must match the right-hand side of the ODE.
        let p = InputFunctionParams::default();
        let (k1, a) = (0.6, 1.3);
        let delta = 1e-5;
        for &t in &[0.3, 1.0, 4.0, 15.0, 50.0] {
            let lhs = (oracle::c_free(k1, a, &p, t + delta) - oracle::c_free(k1, a, &p, t - delta))
                / (2.0 * delta);
            let rhs = k1 * blood_input(t, &p).unwrap() - a * oracle::c_free(k1, a, &p, t);
            let scale = rhs.abs().max(1.0);
            assert!(
                (lhs - rhs).abs() / scale < 1e-6,
                "oracle ODE residual at t={t}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn oracle_integrals_differentiate_back() {
        let p = InputFunctionParams::default();
        let delta = 1e-5;
        for &t in &[0.5, 2.0, 10.0, 40.0] {
            let d_int = (oracle::int_c_free(0.6, 1.3, &p, t + delta)
                - oracle::int_c_free(0.6, 1.3, &p, t - delta))
                / (2.0 * delta);
            let f = oracle::c_free(0.6, 1.3, &p, t);
            assert!((d_int - f).abs() / f.abs().max(1.0) < 1e-6);
            let d_ii = (oracle::int_input(&p, t + delta) - oracle::int_input(&p, t - delta))
                / (2.0 * delta);
            let cp = blood_input(t, &p).unwrap();
            assert!((d_ii - cp).abs() / cp.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn rk4_matches_closed_form_compartments() {
        let p = InputFunctionParams::default();
        let k = KineticParams {
            k1: 0.6,
            k2: 1.2,
            k3: 0.1,
            k4: 0.0,
            v: 0.05,
        };
        let times = [0.5, 1.0, 5.0, 20.0, 60.0];
        let states = tissue_states(&k, &p, STEP, &times).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let cf = oracle::c_free(k.k1, k.k2 + k.k3, &p, t);
            let cb = oracle::c_bound(k.k1, k.k2, k.k3, &p, t);
            let rel_f = (states[i].c_free - cf).abs() / cf.abs().max(1e-12);
            let rel_b = (states[i].c_bound - cb).abs() / cb.abs().max(1e-12);
            assert!(rel_f < 1e-6, "c_free at t={t}: rel {rel_f:.2e}");
            assert!(rel_b < 1e-6, "c_bound at t={t}: rel {rel_b:.2e}");
        }
    }

    #[test]
    fn frame_activity_matches_closed_form_integral() {
        // Kidney-like tissue has k3 = k4 = 0, so the frame integral has a
        // full closed form including the blood volume term.
        let p = InputFunctionParams::default();
        let k = KineticParams {
            k1: 0.263,
            k2: 0.299,
            k3: 0.0,
            k4: 0.0,
            v: 0.438,
        };
        for &(t0, t1) in &[(0.0, 10.0), (20.0, 40.0), (40.0, 60.0)] {
            let got = frame_mean_activity(&k, &p, STEP, t0, t1).unwrap();
            let int_cf = oracle::int_c_free(k.k1, k.k2, &p, t1) - oracle::int_c_free(k.k1, k.k2, &p, t0);
            let int_cp = oracle::int_input(&p, t1) - oracle::int_input(&p, t0);
            let want = ((1.0 - k.v) * int_cf + k.v * int_cp) / (t1 - t0);
            let rel = (got - want).abs() / want.abs();
            assert!(rel < 1e-6, "frame [{t0},{t1}]: rel {rel:.2e}");
        }
    }

    #[test]
    fn adjacent_frames_add_exactly() {
        // The accumulator state makes frame integrals additive by
        // construction; the sum of two frames equals the containing frame.
        let p = InputFunctionParams::default();
        let k = KineticParams {
            k1: 0.864,
            k2: 0.981,
            k3: 0.005,
            k4: 0.016,
            v: 0.0,
        };
        let a = frame_mean_activity(&k, &p, STEP, 0.0, 30.0).unwrap() * 30.0;
        let b = frame_mean_activity(&k, &p, STEP, 30.0, 60.0).unwrap() * 30.0;
        let whole = frame_mean_activity(&k, &p, STEP, 0.0, 60.0).unwrap() * 60.0;
        assert!(((a + b) - whole).abs() <= 1e-9 * whole.abs());
    }

    #[test]
    fn zero_kinetics_give_zero_activity() {
        let p = InputFunctionParams::default();
        let a = frame_mean_activity(&KineticParams::ZERO, &p, STEP, 10.0, 20.0).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn pure_blood_tissue_tracks_input_mean() {
        let p = InputFunctionParams::default();
        let k = KineticParams {
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            k4: 0.0,
            v: 1.0,
        };
        let got = frame_mean_activity(&k, &p, STEP, 5.0, 25.0).unwrap();
        let want = (oracle::int_input(&p, 25.0) - oracle::int_input(&p, 5.0)) / 20.0;
        assert!((got - want).abs() / want < 1e-6);
    }

    #[test]
    fn states_are_non_negative_and_start_at_zero() {
        let p = InputFunctionParams::default();
        let k = KineticParams {
            k1: 1.207,
            k2: 1.909,
            k3: 0.008,
            k4: 0.014,
            v: 0.0,
        };
        let times: Vec<f64> = (0..=120).map(|i| i as f64 * 0.5).collect();
        let states = tissue_states(&k, &p, STEP, &times).unwrap();
        assert_eq!(states[0].c_free, 0.0);
        assert_eq!(states[0].c_bound, 0.0);
        for s in &states {
            assert!(s.c_free >= -1e-12);
            assert!(s.c_bound >= -1e-12);
            assert!(s.integrated_total >= -1e-12);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let p = InputFunctionParams::default();
        let bad = KineticParams {
            k1: -0.1,
            ..KineticParams::ZERO
        };
        assert!(tissue_states(&bad, &p, STEP, &[1.0]).is_err());
        let bad_v = KineticParams {
            v: 1.5,
            ..KineticParams::ZERO
        };
        assert!(tissue_states(&bad_v, &p, STEP, &[1.0]).is_err());
        assert!(tissue_states(&KineticParams::ZERO, &p, STEP, &[2.0, 1.0]).is_err());
        assert!(frame_mean_activity(&KineticParams::ZERO, &p, STEP, 5.0, 5.0).is_err());
    }
}
