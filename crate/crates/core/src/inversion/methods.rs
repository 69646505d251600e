use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use super::reference::{reference_correction, ReferenceNoise};
use super::refine::{fixed_point_loss, FixedPointProblem};
use super::report::{InversionReport, StepRecord, StopReason};
use super::InversionConfig;
use crate::denoiser::{guided_predict, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::{ddim_invert_step_naive, ddim_step, NoiseSchedule};

/// Counts predictor and vjp evaluations on the way through.
struct Counted<'a> {
    inner: &'a dyn Denoiser,
    evals: AtomicUsize,
}

impl<'a> Counted<'a> {
    fn new(inner: &'a dyn Denoiser) -> Self {
        Self {
            inner,
            evals: AtomicUsize::new(0),
        }
    }

    fn count(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

impl Denoiser for Counted<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn supports(&self, c: &Conditioning) -> bool {
        self.inner.supports(c)
    }

    fn predict(&self, z: &Latent, t: usize, s: &NoiseSchedule, c: &Conditioning) -> Result<Latent> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(z, t, s, c)
    }

    fn predict_vjp(
        &self,
        z: &Latent,
        t: usize,
        s: &NoiseSchedule,
        c: &Conditioning,
        u: &Latent,
    ) -> Result<Latent> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_vjp(z, t, s, c, u)
    }
}

fn inversion_error(t: usize, round: usize, l_ref: f64, l_fix: f64) -> Error {
    Error::Inversion {
        t,
        round,
        l_ref,
        l_fix,
    }
}

/// Maps any numeric failure inside a step to an inversion error with context.
fn at_step<T>(r: Result<T>, t: usize, round: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(_) => inversion_error(t, round, f64::NAN, f64::NAN),
        other => other,
    })
}

/// Naive DDIM inversion: each step uses `eps(z_{t-1}, t - 1, c)`.
pub fn ddim_invert(
    z_0: &Latent,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    c: &Conditioning,
    cfg_scale: f64,
) -> Result<InversionReport> {
    let start = Instant::now();
    let d = Counted::new(denoiser);
    let mut z = z_0.clone();
    let mut steps = Vec::with_capacity(schedule.steps());
    for t in 1..=schedule.steps() {
        let eps = at_step(guided_predict(&d, &z, t - 1, schedule, c, cfg_scale), t, 1)?;
        z = at_step(ddim_invert_step_naive(&z, &eps, schedule, t), t, 1)?;
        steps.push(StepRecord {
            t,
            iterations: 1,
            l_ref: Vec::new(),
            l_fix: Vec::new(),
            stop: StopReason::SingleStep,
        });
    }
    Ok(InversionReport {
        method: "ddim".into(),
        z_t: z,
        steps,
        wall_time: start.elapsed(),
        denoiser_evals: d.count(),
        config: None,
    })
}

/// Gradient-free fixed-point iteration `z <- C1 z_{t-1} + C2 eps(z, t, c)`,
/// started from `z_{t-1}`, until successive iterates differ by less than
/// `delta` or `rounds` updates are spent. The recorded trace is the
/// successive difference, which equals `L_fix` at the previous iterate.
pub fn picard_invert(
    z_0: &Latent,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    c: &Conditioning,
    rounds: usize,
    delta: f64,
    cfg_scale: f64,
) -> Result<InversionReport> {
    if rounds == 0 {
        return Err(Error::param("rounds", "K must be at least 1"));
    }
    let start = Instant::now();
    let d = Counted::new(denoiser);
    let mut z_prev = z_0.clone();
    let mut steps = Vec::with_capacity(schedule.steps());
    for t in 1..=schedule.steps() {
        let coeffs = schedule.coeffs(t)?;
        let mut z = z_prev.clone();
        let mut trace = Vec::new();
        let mut stop = StopReason::MaxRounds;
        for round in 1..=rounds {
            let eps = at_step(guided_predict(&d, &z, t, schedule, c, cfg_scale), t, round)?;
            let next = z_prev.lincomb(coeffs.c1, &eps, coeffs.c2)?;
            let diff = next.lincomb(1.0, &z, -1.0)?.norm();
            if !diff.is_finite() {
                return Err(inversion_error(t, round, f64::NAN, diff));
            }
            trace.push(diff);
            z = next;
            if diff < delta {
                stop = StopReason::Converged;
                break;
            }
        }
        steps.push(StepRecord {
            t,
            iterations: trace.len(),
            l_ref: Vec::new(),
            l_fix: trace,
            stop,
        });
        z_prev = z;
    }
    Ok(InversionReport {
        method: "picard".into(),
        z_t: z_prev,
        steps,
        wall_time: start.elapsed(),
        denoiser_evals: d.count(),
        config: None,
    })
}

/// Dual-conditioned inversion.
///
/// Per timestep and round: form the working latent (round 1 from the naive
/// inversion step, later rounds per `carry_forward`), predict the raw noise
/// at it, correct the prediction toward the reference, update the latent
/// with the corrected noise, evaluate `L_fix`, stop if it is below `delta`,
/// otherwise take one gradient step on `L_fix`.
pub fn dci_invert(
    z_0: &Latent,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    p_s: &Conditioning,
    config: &InversionConfig,
    eps_ref: &ReferenceNoise,
) -> Result<InversionReport> {
    config.validate()?;
    z_0.check_same_shape(&eps_ref.values)?;
    let start = Instant::now();
    let d = Counted::new(denoiser);
    let scale = config.cfg_scale;
    let mut z_prev = z_0.clone();
    let mut steps = Vec::with_capacity(schedule.steps());

    for t in 1..=schedule.steps() {
        let coeffs = schedule.coeffs(t)?;
        let eps_prev = at_step(
            guided_predict(&d, &z_prev, t - 1, schedule, p_s, scale),
            t,
            1,
        )?;
        let z_init = ddim_invert_step_naive(&z_prev, &eps_prev, schedule, t)?;
        let problem = FixedPointProblem {
            z_prev: &z_prev,
            t,
            denoiser: &d,
            conditioning: p_s,
            schedule,
            cfg_scale: scale,
            correction: config.corrected_fix.then_some((eps_ref, config.lambda)),
        };

        let mut z = z_init.clone();
        let mut l_ref_trace = Vec::with_capacity(config.rounds);
        let mut l_fix_trace = Vec::with_capacity(config.rounds);
        let mut stop = StopReason::MaxRounds;
        for round in 1..=config.rounds {
            if round > 1 && !config.carry_forward {
                z = z_init.clone();
            }
            let eps_raw = at_step(guided_predict(&d, &z, t, schedule, p_s, scale), t, round)?;
            let (eps_hat, l_ref) = reference_correction(&eps_raw, eps_ref, config.lambda)?;
            z = z_prev.lincomb(coeffs.c1, &eps_hat, coeffs.c2)?;
            let (l_fix, grad) = fixed_point_loss(&problem, &z)
                .map_err(|_| inversion_error(t, round, l_ref, f64::NAN))?;
            l_ref_trace.push(l_ref);
            l_fix_trace.push(l_fix);
            if !l_ref.is_finite() || !l_fix.is_finite() {
                return Err(inversion_error(t, round, l_ref, l_fix));
            }
            if l_fix < config.delta {
                stop = StopReason::Converged;
                break;
            }
            z = z
                .lincomb(1.0, &grad, -config.eta)
                .map_err(|_| inversion_error(t, round, l_ref, l_fix))?;
        }
        steps.push(StepRecord {
            t,
            iterations: l_fix_trace.len(),
            l_ref: l_ref_trace,
            l_fix: l_fix_trace,
            stop,
        });
        z_prev = z;
    }

    Ok(InversionReport {
        method: if config.lambda == 0.0 { "spd" } else { "dci" }.into(),
        z_t: z_prev,
        steps,
        wall_time: start.elapsed(),
        denoiser_evals: d.count(),
        config: Some(config.clone()),
    })
}

/// Deterministic DDIM sampling from `z_T` down to `z_0`.
pub fn reconstruct(
    z_t: &Latent,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    c: &Conditioning,
    cfg_scale: f64,
) -> Result<Latent> {
    sample_from(z_t, schedule.steps(), schedule, denoiser, c, cfg_scale)
}

/// DDIM sampling starting at timestep `from_t`; `from_t = 0` is the identity.
pub fn sample_from(
    z: &Latent,
    from_t: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    c: &Conditioning,
    cfg_scale: f64,
) -> Result<Latent> {
    if from_t > schedule.steps() {
        return Err(Error::Index {
            t: from_t,
            max: schedule.steps(),
        });
    }
    let mut z = z.clone();
    for t in (1..=from_t).rev() {
        let eps = guided_predict(denoiser, &z, t, schedule, c, cfg_scale)
            .map_err(|_| Error::Sampling { t })?;
        z = ddim_step(&z, &eps, schedule, t).map_err(|_| Error::Sampling { t })?;
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited: Latent,
    pub report: InversionReport,
}

/// Invert under `c_src`, then sample back under `c_tgt`.
pub fn edit_condition_swap(
    z_0: &Latent,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    c_src: &Conditioning,
    c_tgt: &Conditioning,
    config: &InversionConfig,
    eps_ref: &ReferenceNoise,
) -> Result<EditOutcome> {
    for c in [c_src, c_tgt] {
        if !denoiser.supports(c) {
            return Err(Error::contract(format!(
                "{} does not support {c} for editing",
                denoiser.name()
            )));
        }
    }
    let mut report = dci_invert(z_0, schedule, denoiser, c_src, config, eps_ref)?;
    let edited = reconstruct(&report.z_t, schedule, denoiser, c_tgt, config.cfg_scale)?;
    report.method = format!("edit:{}", report.method);
    Ok(EditOutcome { edited, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianMixture, MixtureComponent};
    use crate::inversion::{extract_reference, ReferenceMode};
    use crate::metrics::recon_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(dim: usize, seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::flat((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn affine() -> GaussianMixture {
        GaussianMixture::single(vec![0.0; 4], 1.0).unwrap()
    }

    fn two_class() -> GaussianMixture {
        GaussianMixture::new(
            vec![
                MixtureComponent::new(0.5, vec![1.5, 1.0, -0.5], Some(0)),
                MixtureComponent::new(0.5, vec![-1.5, -1.0, 0.5], Some(1)),
            ],
            0.4,
        )
        .unwrap()
    }

    struct ConstantNoise(Vec<f64>);
    impl Denoiser for ConstantNoise {
        fn name(&self) -> &str {
            "constant"
        }
        fn supports(&self, _: &Conditioning) -> bool {
            true
        }
        fn predict(
            &self,
            z: &Latent,
            _: usize,
            _: &NoiseSchedule,
            _: &Conditioning,
        ) -> Result<Latent> {
            z.with_values(self.0.clone())
        }
    }

    #[test]
    fn ddim_single_step_applies_practical_formula() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let gm = affine();
        let z0 = gaussian(4, 1);
        let rep = ddim_invert(&z0, &s, &gm, &Conditioning::Null, 1.0).unwrap();
        let eps = gm.predict(&z0, 0, &s, &Conditioning::Null).unwrap();
        let want = ddim_invert_step_naive(&z0, &eps, &s, 1).unwrap();
        assert_eq!(rep.z_t, want);
        assert_eq!(rep.steps.len(), 1);
        assert_eq!(rep.denoiser_evals, 1);
    }

    #[test]
    fn naive_round_trip_is_inexact() {
        let s = NoiseSchedule::default_linear();
        let gm = two_class();
        for seed in 0..5 {
            let z0 = gaussian(3, seed);
            let rep = ddim_invert(&z0, &s, &gm, &Conditioning::Label(0), 1.0).unwrap();
            let back = reconstruct(&rep.z_t, &s, &gm, &Conditioning::Label(0), 1.0).unwrap();
            assert!(recon_error(&z0, &back).unwrap() > 0.0);
        }
    }

    #[test]
    fn degenerate_dci_is_one_fixed_point_update_past_naive() {
        let s = NoiseSchedule::default_linear();
        let gm = two_class();
        let z0 = gaussian(3, 7);
        let c = Conditioning::Label(1);
        let cfg = InversionConfig {
            rounds: 1,
            lambda: 0.0,
            eta: 1e-12,
            ..InversionConfig::default()
        };
        let reference = extract_reference(&z0, ReferenceMode::Whitened, None).unwrap();
        let rep = dci_invert(&z0, &s, &gm, &c, &cfg, &reference).unwrap();

        // naive init, then z_t = C1 z_{t-1} + C2 eps(z_init, t)
        let mut z = z0.clone();
        for t in 1..=s.steps() {
            let co = s.coeffs(t).unwrap();
            let e0 = gm.predict(&z, t - 1, &s, &c).unwrap();
            let init = z.lincomb(co.c1, &e0, co.c2).unwrap();
            let e1 = gm.predict(&init, t, &s, &c).unwrap();
            z = z.lincomb(co.c1, &e1, co.c2).unwrap();
        }
        let gap = rep.z_t.lincomb(1.0, &z, -1.0).unwrap().norm();
        assert!(gap <= 1e-8, "{gap}");

        // with a state-independent predictor the evaluation point is moot
        let flat_noise = ConstantNoise(vec![0.3, -0.1, 0.8]);
        let a = dci_invert(&z0, &s, &flat_noise, &c, &cfg, &reference).unwrap();
        let b = ddim_invert(&z0, &s, &flat_noise, &c, 1.0).unwrap();
        assert!(a.z_t.lincomb(1.0, &b.z_t, -1.0).unwrap().norm() <= 1e-8);
    }

    #[test]
    fn report_contract_holds() {
        let s = NoiseSchedule::default_linear();
        let gm = two_class();
        let z0 = gaussian(3, 2);
        let reference = extract_reference(&z0, ReferenceMode::Whitened, None).unwrap();
        let cfg = InversionConfig::default();
        let rep = dci_invert(&z0, &s, &gm, &Conditioning::Label(0), &cfg, &reference).unwrap();
        assert_eq!(rep.steps.len(), 50);
        for st in &rep.steps {
            assert!(st.iterations <= cfg.rounds);
            assert_eq!(st.l_fix.len(), st.iterations);
            assert!(st.l_fix.iter().all(|l| l.is_finite() && *l >= 0.0));
            let last = *st.l_fix.last().unwrap();
            match st.stop {
                StopReason::Converged => assert!(last < cfg.delta),
                _ => assert_eq!(st.iterations, cfg.rounds),
            }
        }
    }

    #[test]
    fn zero_lambda_converges_like_fixed_point_search() {
        let s = NoiseSchedule::default_linear();
        let gm = affine();
        let z0 = gaussian(4, 3);
        let reference = extract_reference(&z0, ReferenceMode::Whitened, None).unwrap();
        let cfg = InversionConfig {
            lambda: 0.0,
            ..InversionConfig::default()
        };
        let rep = dci_invert(&z0, &s, &gm, &Conditioning::Null, &cfg, &reference).unwrap();
        assert_eq!(rep.method, "spd");
        assert!(rep.steps.iter().all(|st| st.stop == StopReason::Converged));
    }

    #[test]
    fn picard_converges_to_closed_form_and_contracts() {
        let s = NoiseSchedule::default_linear();
        let gm = affine();
        let z0 = gaussian(4, 4);
        let rep = picard_invert(&z0, &s, &gm, &Conditioning::Null, 50, 1e-13, 1.0).unwrap();
        // replay the closed-form affine solve
        let mut z = z0.clone();
        for t in 1..=s.steps() {
            let co = s.coeffs(t).unwrap();
            z = z.scaled(co.c1 / (1.0 - co.c2 * (1.0 - s.alpha_bar(t)).sqrt()));
        }
        assert!(rep.z_t.lincomb(1.0, &z, -1.0).unwrap().norm() <= 1e-6);
        for st in &rep.steps {
            for w in st.l_fix.windows(2) {
                assert!(w[1] < w[0]);
            }
        }
    }

    #[test]
    fn picard_single_round_is_naive_with_current_timestep() {
        let s = NoiseSchedule::default_linear();
        let gm = two_class();
        let z0 = gaussian(3, 5);
        let c = Conditioning::Label(0);
        let rep = picard_invert(&z0, &s, &gm, &c, 1, 1e-9, 1.0).unwrap();
        let mut z = z0.clone();
        for t in 1..=s.steps() {
            let e = gm.predict(&z, t, &s, &c).unwrap();
            z = ddim_invert_step_naive(&z, &e, &s, t).unwrap();
        }
        assert_eq!(rep.z_t, z);
    }

    #[test]
    fn sampling_from_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let z = gaussian(3, 9);
        let out = sample_from(&z, 0, &s, &two_class(), &Conditioning::Null, 1.0).unwrap();
        assert_eq!(out, z);
        assert!(sample_from(&z, 51, &s, &two_class(), &Conditioning::Null, 1.0).is_err());
    }

    #[test]
    fn reconstruction_is_linear_on_affine_oracle() {
        let s = NoiseSchedule::default_linear();
        let gm = affine();
        let (a, b) = (gaussian(4, 10), gaussian(4, 11));
        let ra = reconstruct(&a, &s, &gm, &Conditioning::Null, 1.0).unwrap();
        let rb = reconstruct(&b, &s, &gm, &Conditioning::Null, 1.0).unwrap();
        let mix = reconstruct(
            &a.lincomb(2.0, &b, -0.5).unwrap(),
            &s,
            &gm,
            &Conditioning::Null,
            1.0,
        )
        .unwrap();
        let want = ra.lincomb(2.0, &rb, -0.5).unwrap();
        assert!(mix.lincomb(1.0, &want, -1.0).unwrap().norm() <= 1e-12);
    }

    #[test]
    fn same_condition_edit_is_plain_reconstruction() {
        let s = NoiseSchedule::default_linear();
        let gm = two_class();
        let z0 = gaussian(3, 12);
        let reference = extract_reference(&z0, ReferenceMode::Whitened, None).unwrap();
        let cfg = InversionConfig::default();
        let c = Conditioning::Label(0);
        let out = edit_condition_swap(&z0, &s, &gm, &c, &c, &cfg, &reference).unwrap();
        let inv = dci_invert(&z0, &s, &gm, &c, &cfg, &reference).unwrap();
        let plain = reconstruct(&inv.z_t, &s, &gm, &c, 1.0).unwrap();
        assert_eq!(out.edited, plain);
        assert_eq!(out.report.method, "edit:dci");

        let err = edit_condition_swap(&z0, &s, &gm, &c, &Conditioning::Label(5), &cfg, &reference);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn blowup_reports_timestep() {
        struct Exploding;
        impl Denoiser for Exploding {
            fn name(&self) -> &str {
                "exploding"
            }
            fn supports(&self, _: &Conditioning) -> bool {
                true
            }
            fn predict(
                &self,
                z: &Latent,
                t: usize,
                _: &NoiseSchedule,
                _: &Conditioning,
            ) -> Result<Latent> {
                if t >= 3 {
                    Err(Error::Numeric("prediction".into()))
                } else {
                    Ok(z.clone())
                }
            }
        }
        let s = NoiseSchedule::default_linear();
        let z0 = gaussian(2, 0);
        let err = ddim_invert(&z0, &s, &Exploding, &Conditioning::Null, 1.0).unwrap_err();
        assert!(matches!(err, Error::Inversion { t: 4, .. }), "{err}");
        let reference = extract_reference(&z0, ReferenceMode::Whitened, None).unwrap();
        let err = dci_invert(
            &z0,
            &s,
            &Exploding,
            &Conditioning::Null,
            &InversionConfig::default(),
            &reference,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Inversion { t: 3, .. }), "{err}");
        let err = reconstruct(&z0, &s, &Exploding, &Conditioning::Null, 1.0).unwrap_err();
        assert!(matches!(err, Error::Sampling { t: 50 }));
    }
}
