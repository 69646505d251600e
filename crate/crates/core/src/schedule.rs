//! Noise schedule and the deterministic DDIM step arithmetic.
//!
//! Indexing: `alpha_bar[0] = 1` is the data end and `alpha_bar[T]` the noise
//! end, so step `t` always maps between `alpha_bar[t - 1]` and `alpha_bar[t]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Cumulative signal retention `alpha_bar` over `T + 1` timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

/// Inversion coefficients of one step: `z_t = c1 * z_{t-1} + c2 * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub c1: f64,
    pub c2: f64,
}

impl NoiseSchedule {
    /// Linear-beta schedule: `alpha_bar[t] = prod_{s <= t} (1 - beta_s)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} not in (0, 1)"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Validates an explicit `alpha_bar` sequence (first entry must be exactly 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::param("alpha_bar", "needs at least two entries"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::param("alpha_bar", "alpha_bar[0] must equal 1"));
        }
        for (i, w) in alpha_bar.windows(2).enumerate() {
            if !w[1].is_finite() || w[1] <= 0.0 || w[1] >= w[0] {
                return Err(Error::param(
                    "alpha_bar",
                    format!(
                        "entry {} = {} breaks strict decrease in (0, 1]",
                        i + 1,
                        w[1]
                    ),
                ));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar[t]` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Inversion coefficients `(C1, C2)` for step `t` in `1..=T`.
    pub fn coeffs(&self, t: usize) -> Result<StepCoeffs> {
        self.check_step(t)?;
        Ok(coeffs_between(self.alpha_bar[t - 1], self.alpha_bar[t]))
    }
}

/// `C1 = sqrt(a_t / a_prev)`, `C2 = sqrt(a_t) * (sqrt(1/a_t - 1) - sqrt(1/a_prev - 1))`.
pub fn coeffs_between(alpha_prev: f64, alpha_t: f64) -> StepCoeffs {
    let c1 = alpha_t.sqrt() / alpha_prev.sqrt();
    let c2 = alpha_t.sqrt() * (noise_ratio(alpha_t) - noise_ratio(alpha_prev));
    StepCoeffs { c1, c2 }
}

/// `sqrt(1/a - 1)`, clamped at zero for `a = 1`.
fn noise_ratio(alpha: f64) -> f64 {
    (1.0 / alpha - 1.0).max(0.0).sqrt()
}

/// Deterministic DDIM sampling step `z_t -> z_{t-1}`.
pub fn ddim_step(z_t: &Latent, eps: &Latent, schedule: &NoiseSchedule, t: usize) -> Result<Latent> {
    schedule.check_step(t)?;
    z_t.check_same_shape(eps)?;
    let a_prev = schedule.alpha_bar[t - 1];
    let a_t = schedule.alpha_bar[t];
    let scale = a_prev.sqrt() / a_t.sqrt();
    let mix = a_prev.sqrt() * (noise_ratio(a_prev) - noise_ratio(a_t));
    z_t.lincomb(scale, eps, mix)
}

/// Practical inversion step `z_{t-1} -> z_t = C1 z_{t-1} + C2 eps`.
pub fn ddim_invert_step_naive(
    z_prev: &Latent,
    eps: &Latent,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Latent> {
    let StepCoeffs { c1, c2 } = schedule.coeffs(t)?;
    z_prev.lincomb(c1, eps, c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_schedule_hand_products() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.81, epsilon = 1e-15);
    }

    #[test]
    fn default_schedule_terminal_level() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.steps(), 50);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // direct product: exp(sum log(1 - beta)) = 0.60295...
        assert!((s.alpha_bar(50) - 0.6).abs() < 0.1, "{}", s.alpha_bar(50));
    }

    #[test]
    fn bad_bounds_name_the_field() {
        let err = NoiseSchedule::linear(0, 1e-4, 0.02).unwrap_err();
        assert!(err.to_string().contains("steps"));
        let err = NoiseSchedule::linear(10, 0.0, 0.02).unwrap_err();
        assert!(err.to_string().contains("beta_start"));
        let err = NoiseSchedule::linear(10, 0.1, 0.05).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
        let err = NoiseSchedule::linear(10, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn coeff_closed_forms() {
        let c = coeffs_between(0.3, 0.3);
        assert_abs_diff_eq!(c.c1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.c2, 0.0, epsilon = 1e-15);

        let c = coeffs_between(1.0, 0.25);
        assert_abs_diff_eq!(c.c1, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2, 0.866_025_403_784_438_6, epsilon = 1e-12);

        let c = coeffs_between(0.5, 0.25);
        assert_abs_diff_eq!(c.c1, 0.707_106_781_186_547_5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.c2, 0.366_025_403_784_438_6, epsilon = 1e-12);
    }

    #[test]
    fn coeffs_index_errors() {
        let s = NoiseSchedule::linear(3, 0.1, 0.2).unwrap();
        assert!(matches!(s.coeffs(0), Err(Error::Index { t: 0, max: 3 })));
        assert!(matches!(s.coeffs(4), Err(Error::Index { .. })));
        assert!(s.coeffs(3).is_ok());
    }

    fn one_step_schedule(a_t: f64) -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, a_t]).unwrap()
    }

    #[test]
    fn ddim_step_hand_values() {
        let s = one_step_schedule(0.25);
        let z = Latent::flat(vec![1.0]).unwrap();
        let e = Latent::flat(vec![1.0]).unwrap();
        let out = ddim_step(&z, &e, &s, 1).unwrap();
        assert_abs_diff_eq!(out.as_slice()[0], 2.0 - 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.as_slice()[0], 0.26795, epsilon = 1e-5);

        let zero = Latent::flat(vec![0.0]).unwrap();
        let out = ddim_step(&z, &zero, &s, 1).unwrap();
        assert_abs_diff_eq!(out.as_slice()[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn naive_invert_hand_values() {
        let s = one_step_schedule(0.25);
        let z = Latent::flat(vec![2.0]).unwrap();
        let e = Latent::flat(vec![1.0]).unwrap();
        let out = ddim_invert_step_naive(&z, &e, &s, 1).unwrap();
        assert_abs_diff_eq!(out.as_slice()[0], 1.0 + 0.75f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.as_slice()[0], 1.86603, epsilon = 1e-5);

        let zero = Latent::flat(vec![0.0]).unwrap();
        let out = ddim_invert_step_naive(&z, &zero, &s, 1).unwrap();
        assert_abs_diff_eq!(out.as_slice()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn step_shape_mismatch() {
        let s = one_step_schedule(0.5);
        let z = Latent::flat(vec![1.0, 2.0]).unwrap();
        let e = Latent::flat(vec![1.0]).unwrap();
        assert!(matches!(ddim_step(&z, &e, &s, 1), Err(Error::Shape { .. })));
        assert!(matches!(
            ddim_invert_step_naive(&z, &e, &s, 1),
            Err(Error::Shape { .. })
        ));
    }

    fn arb_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn shared_noise_round_trip(z in arb_vec(6), e in arb_vec(6), t in 1usize..=50) {
            let s = NoiseSchedule::default_linear();
            let z = Latent::flat(z).unwrap();
            let e = Latent::flat(e).unwrap();
            let up = ddim_invert_step_naive(&z, &e, &s, t).unwrap();
            let back = ddim_step(&up, &e, &s, t).unwrap();
            for (a, b) in back.as_slice().iter().zip(z.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn step_is_linear_in_pair(
            z1 in arb_vec(4), e1 in arb_vec(4), z2 in arb_vec(4), e2 in arb_vec(4),
            a in -3.0f64..3.0, b in -3.0f64..3.0, t in 1usize..=50,
        ) {
            let s = NoiseSchedule::default_linear();
            let (z1, e1) = (Latent::flat(z1).unwrap(), Latent::flat(e1).unwrap());
            let (z2, e2) = (Latent::flat(z2).unwrap(), Latent::flat(e2).unwrap());
            let lhs = ddim_step(
                &z1.lincomb(a, &z2, b).unwrap(),
                &e1.lincomb(a, &e2, b).unwrap(),
                &s,
                t,
            ).unwrap();
            let rhs = ddim_step(&z1, &e1, &s, t).unwrap()
                .lincomb(a, &ddim_step(&z2, &e2, &s, t).unwrap(), b).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn coeffs_finite_and_bounded(b0 in 1e-5f64..0.05, span in 0.0f64..0.2, t in 1usize..=40) {
            let s = NoiseSchedule::linear(40, b0, b0 + span).unwrap();
            let c = s.coeffs(t).unwrap();
            prop_assert!(c.c1.is_finite() && c.c2.is_finite());
            prop_assert!(c.c1.abs() <= 1.0);
        }
    }
}
