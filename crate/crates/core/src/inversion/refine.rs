use super::reference::{reference_correction, ReferenceNoise};
use crate::autodiff::NORM_GUARD;
use crate::denoiser::{guided_predict, guided_vjp, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{dot, norm, Latent};
use crate::schedule::NoiseSchedule;

/// The per-timestep map `f(z) = C1 z_{t-1} + C2 eps(z, t, c)` whose fixed
/// point is the ideal inversion of step `t`.
#[derive(Clone, Copy)]
pub struct FixedPointProblem<'a> {
    pub z_prev: &'a Latent,
    pub t: usize,
    pub denoiser: &'a dyn Denoiser,
    pub conditioning: &'a Conditioning,
    pub schedule: &'a NoiseSchedule,
    pub cfg_scale: f64,
    /// When set, `f` uses the reference-corrected noise instead of the raw
    /// prediction.
    pub correction: Option<(&'a ReferenceNoise, f64)>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub z: Latent,
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

impl FixedPointProblem<'_> {
    fn noise(&self, z: &Latent) -> Result<Latent> {
        let eps = guided_predict(
            self.denoiser,
            z,
            self.t,
            self.schedule,
            self.conditioning,
            self.cfg_scale,
        )?;
        match self.correction {
            Some((reference, lambda)) => Ok(reference_correction(&eps, reference, lambda)?.0),
            None => Ok(eps),
        }
    }

    /// `f(z)`.
    pub fn map(&self, z: &Latent) -> Result<Latent> {
        let c = self.schedule.coeffs(self.t)?;
        self.z_prev.lincomb(c.c1, &self.noise(z)?, c.c2)
    }

    /// `w^T d eps_hat / d eps` for the correction `e - lambda (e - r)/||e - r||`.
    fn correction_vjp(&self, eps_raw: &Latent, w: &[f64]) -> Vec<f64> {
        let Some((reference, lambda)) = self.correction else {
            return w.to_vec();
        };
        let d: Vec<f64> = eps_raw
            .as_slice()
            .iter()
            .zip(reference.values.as_slice())
            .map(|(e, r)| e - r)
            .collect();
        let n = norm(&d);
        if n <= NORM_GUARD {
            return w.to_vec();
        }
        let proj = dot(&d, w) / (n * n);
        w.iter()
            .zip(&d)
            .map(|(wi, di)| wi - lambda / n * (wi - proj * di))
            .collect()
    }
}

/// `L_fix = ||f(z) - z||_2` and its gradient in `z`.
///
/// With `r = f(z) - z` the gradient is `C2 J^T r/|r| - r/|r|`, the Jacobian
/// product coming from the denoiser's vjp; zero when `|r|` is at the guard.
pub fn fixed_point_loss(problem: &FixedPointProblem<'_>, z: &Latent) -> Result<(f64, Latent)> {
    let c = problem.schedule.coeffs(problem.t)?;
    let eps_raw = guided_predict(
        problem.denoiser,
        z,
        problem.t,
        problem.schedule,
        problem.conditioning,
        problem.cfg_scale,
    )?;
    let eps = match problem.correction {
        Some((reference, lambda)) => reference_correction(&eps_raw, reference, lambda)?.0,
        None => eps_raw.clone(),
    };
    let f = problem.z_prev.lincomb(c.c1, &eps, c.c2)?;
    let resid = f.lincomb(1.0, z, -1.0)?;
    let loss = resid.norm();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("L_fix at t={}", problem.t)));
    }
    if loss <= NORM_GUARD {
        return Ok((loss, Latent::zeros(z.shape())));
    }
    let unit: Vec<f64> = resid.as_slice().iter().map(|r| r / loss).collect();
    let through_correction = problem.correction_vjp(&eps_raw, &unit);
    let jt = guided_vjp(
        problem.denoiser,
        z,
        problem.t,
        problem.schedule,
        problem.conditioning,
        problem.cfg_scale,
        &z.with_values(through_correction)?,
    )?;
    let grad = jt
        .as_slice()
        .iter()
        .zip(&unit)
        .map(|(j, u)| c.c2 * j - u)
        .collect();
    Ok((loss, z.with_values(grad)?))
}

/// Gradient descent `z <- z - eta * grad L_fix`, stopping as soon as
/// `L_fix < delta` (checked before each step) or after `max_iters`
/// evaluations.
pub fn fixed_point_refine(
    problem: &FixedPointProblem<'_>,
    z_init: &Latent,
    eta: f64,
    max_iters: usize,
    delta: f64,
) -> Result<RefineOutcome> {
    if !(eta > 0.0) {
        return Err(Error::param("eta", "must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::param("rounds", "need at least one iteration"));
    }
    problem.z_prev.check_same_shape(z_init)?;
    let mut z = z_init.clone();
    let mut trace = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        let (loss, grad) = fixed_point_loss(problem, &z)?;
        trace.push(loss);
        if loss < delta {
            return Ok(RefineOutcome {
                z,
                iterations: trace.len(),
                loss_trace: trace,
                converged: true,
            });
        }
        z = z.lincomb(1.0, &grad, -eta)?;
    }
    Ok(RefineOutcome {
        z,
        iterations: trace.len(),
        loss_trace: trace,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianMixture, MixtureComponent};
    use crate::inversion::ReferenceMode;
    use crate::schedule::ddim_invert_step_naive;

    fn affine_oracle() -> GaussianMixture {
        GaussianMixture::single(vec![0.0; 4], 1.0).unwrap()
    }

    fn problem<'a>(
        gm: &'a dyn Denoiser,
        s: &'a NoiseSchedule,
        z_prev: &'a Latent,
        t: usize,
    ) -> FixedPointProblem<'a> {
        FixedPointProblem {
            z_prev,
            t,
            denoiser: gm,
            conditioning: &Conditioning::Null,
            schedule: s,
            cfg_scale: 1.0,
            correction: None,
        }
    }

    /// `z* = C1 z_prev / (1 - C2 sqrt(1 - a_t))` for `eps(z) = sqrt(1 - a_t) z`.
    fn closed_form_fixed_point(s: &NoiseSchedule, z_prev: &Latent, t: usize) -> Latent {
        let c = s.coeffs(t).unwrap();
        let k = (1.0 - s.alpha_bar(t)).sqrt();
        z_prev.scaled(c.c1 / (1.0 - c.c2 * k))
    }

    #[test]
    fn exact_fixed_point_stops_immediately() {
        let gm = affine_oracle();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.4, -1.2, 0.8, 2.0]).unwrap();
        let star = closed_form_fixed_point(&s, &zp, 17);
        let p = problem(&gm, &s, &zp, 17);
        let out = fixed_point_refine(&p, &star, 1e-3, 5, 1e-5).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_eq!(out.z, star);
    }

    #[test]
    fn refinement_from_latent_update_lands_on_closed_form() {
        let gm = affine_oracle();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.4, -1.2, 0.8, 2.0]).unwrap();
        for t in [1, 10, 25, 50] {
            let p = problem(&gm, &s, &zp, t);
            let naive_eps = gm.predict(&zp, t - 1, &s, &Conditioning::Null).unwrap();
            let init = ddim_invert_step_naive(&zp, &naive_eps, &s, t).unwrap();
            // the refinement stage receives the latent after the update with eps(z_t)
            let updated = p.map(&init).unwrap();
            let out = fixed_point_refine(&p, &updated, 1e-3, 10, 1e-5).unwrap();
            assert!(out.converged && out.iterations <= 10);
            let star = closed_form_fixed_point(&s, &zp, t);
            let gap = out.z.lincomb(1.0, &star, -1.0).unwrap().norm();
            // L_fix = (1 - C2 sqrt(1 - a_t)) |z - z*| on this oracle
            let c = s.coeffs(t).unwrap();
            let contraction = 1.0 - c.c2 * (1.0 - s.alpha_bar(t)).sqrt();
            assert!(gap <= 1e-5 / contraction, "t={t}: {gap}");
            assert!((out.loss_trace[out.iterations - 1] - contraction * gap).abs() <= 1e-12);
        }
    }

    #[test]
    fn vanishing_step_barely_moves() {
        let gm = affine_oracle();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.4, -1.2, 0.8, 2.0]).unwrap();
        let init = zp.scaled(1.3);
        let p = problem(&gm, &s, &zp, 30);
        let out = fixed_point_refine(&p, &init, 1e-12, 5, 1e-5).unwrap();
        assert_eq!(out.iterations, 5);
        assert!(!out.converged);
        assert!(out.z.lincomb(1.0, &init, -1.0).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn loss_decreases_strictly_on_affine_oracle_until_convergence() {
        let gm = affine_oracle();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.4, -1.2, 0.8, 2.0]).unwrap();
        let p = problem(&gm, &s, &zp, 40);
        // start far enough away that every step stays on one side of z*
        let init = closed_form_fixed_point(&s, &zp, 40).scaled(1.05);
        let out = fixed_point_refine(&p, &init, 1e-3, 50, 1e-5).unwrap();
        for w in out.loss_trace.windows(2) {
            assert!(w[1] < w[0], "{:?}", out.loss_trace);
        }
    }

    fn gradient_matches_differences(p: &FixedPointProblem<'_>, z: &Latent) {
        let (_, grad) = fixed_point_loss(p, z).unwrap();
        let loss_at = |x: &[f64]| {
            let zx = z.with_values(x.to_vec()).unwrap();
            p.map(&zx).unwrap().lincomb(1.0, &zx, -1.0).unwrap().norm()
        };
        let fd = crate::autodiff::finite_diff_grad(loss_at, z.as_slice(), 1e-6).unwrap();
        for (a, b) in grad.as_slice().iter().zip(&fd) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel <= 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let gm = GaussianMixture::new(
            vec![
                MixtureComponent::new(0.4, vec![1.0, 0.0, -0.5], Some(0)),
                MixtureComponent::new(0.6, vec![-1.0, 0.5, 0.5], Some(1)),
            ],
            0.5,
        )
        .unwrap();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.2, -0.3, 0.9]).unwrap();
        let z = Latent::flat(vec![0.5, 0.1, 0.4]).unwrap();
        let reference = ReferenceNoise {
            values: Latent::flat(vec![1.0, -2.0, 0.5]).unwrap(),
            provenance: ReferenceMode::Oracle,
        };
        for (correction, cfg) in [(None, 1.0), (Some((&reference, 0.7)), 1.0), (None, 3.0)] {
            let p = FixedPointProblem {
                correction,
                cfg_scale: cfg,
                conditioning: &Conditioning::Label(1),
                ..problem(&gm, &s, &zp, 12)
            };
            gradient_matches_differences(&p, &z);
        }
    }

    #[test]
    fn non_finite_inputs_error() {
        let gm = affine_oracle();
        let s = NoiseSchedule::default_linear();
        let zp = Latent::flat(vec![0.0; 4]).unwrap();
        let p = problem(&gm, &s, &zp, 3);
        assert!(fixed_point_refine(&p, &zp, 0.0, 3, 1e-5).is_err());
        assert!(fixed_point_refine(&p, &zp, 1e-3, 0, 1e-5).is_err());
    }
}
