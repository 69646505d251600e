use serde::{Deserialize, Serialize};

use super::{check_inputs, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{dot, Latent};
use crate::schedule::NoiseSchedule;

/// Lower clamp on `1 - alpha_bar` inside the oracle.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Class label selecting this component under `Conditioning::Label`.
    pub label: Option<usize>,
}

impl MixtureComponent {
    pub fn new(weight: f64, mean: Vec<f64>, label: Option<usize>) -> Self {
        Self {
            weight,
            mean,
            label,
        }
    }
}

/// Isotropic Gaussian mixture data distribution with its exact noise predictor.
///
/// For data `z_0 ~ sum_k w_k N(mu_k, sigma0^2 I)` and
/// `z_t = sqrt(a) z_0 + sqrt(1 - a) eps`, the optimal predictor is
/// `eps*(z) = (z - sqrt(a) m(z)) / sqrt(1 - a)` with `m(z) = E[z_0 | z_t = z]`.
/// A label conditioning restricts the mixture to that label's components.
/// An embedding conditioning holds one nonnegative factor per component and
/// reweights the prior by it; zero factors drop components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    sigma0: f64,
    dim: usize,
}

/// Per-call quantities shared by `predict` and `predict_vjp`.
struct Posterior {
    /// responsibilities over the active components
    resp: Vec<(usize, f64)>,
    sqrt_a: f64,
    noise_std: f64,
    marginal_var: f64,
    shrink: f64,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>, sigma0: f64) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::param("components", "mixture needs a component"));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::param("components", "means must be nonempty"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::param("sigma0", format!("{sigma0} must be positive")));
        }
        for c in &components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::param("weights", "weights must be positive"));
            }
            if c.mean.len() != dim {
                return Err(Error::param("means", "means must share one shape"));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("means", "means must be finite"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param("weights", format!("sum to {total}, not 1")));
        }
        Ok(Self {
            components,
            sigma0,
            dim,
        })
    }

    /// One component at `mean` carrying label 0.
    pub fn single(mean: Vec<f64>, sigma0: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent::new(1.0, mean, Some(0))], sigma0)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Prior mean of the data under a conditioning.
    pub fn conditional_mean(&self, c: &Conditioning) -> Result<Vec<f64>> {
        let active = self.active(c)?;
        let total: f64 = active.iter().map(|&(_, w)| w).sum();
        let mut m = vec![0.0; self.dim];
        for &(k, w) in &active {
            let w = w / total;
            for (mi, mu) in m.iter_mut().zip(&self.components[k].mean) {
                *mi += w * mu;
            }
        }
        Ok(m)
    }

    /// Components allowed by `c`, with their unnormalised prior weights.
    fn active(&self, c: &Conditioning) -> Result<Vec<(usize, f64)>> {
        let comps = self.components.iter().enumerate();
        let idx: Vec<(usize, f64)> = match c {
            Conditioning::Null => comps.map(|(k, comp)| (k, comp.weight)).collect(),
            Conditioning::Label(l) => comps
                .filter(|(_, comp)| comp.label == Some(*l))
                .map(|(k, comp)| (k, comp.weight))
                .collect(),
            Conditioning::Embedding(v) => {
                if v.len() != self.components.len()
                    || v.iter().any(|x| !(x.is_finite() && *x >= 0.0))
                {
                    return Err(Error::contract(format!(
                        "mixture embedding needs {} nonnegative factors",
                        self.components.len()
                    )));
                }
                comps
                    .zip(v)
                    .filter(|(_, f)| **f > 0.0)
                    .map(|((k, comp), f)| (k, comp.weight * f))
                    .collect()
            }
        };
        if idx.is_empty() {
            return Err(Error::contract(format!(
                "mixture has no components for {c}"
            )));
        }
        Ok(idx)
    }

    fn posterior(&self, z: &[f64], alpha_bar: f64, c: &Conditioning) -> Result<Posterior> {
        let active = self.active(c)?;
        let sqrt_a = alpha_bar.sqrt();
        let one_minus = 1.0 - alpha_bar;
        let noise_std = one_minus.max(VARIANCE_FLOOR).sqrt();
        let marginal_var = alpha_bar * self.sigma0 * self.sigma0 + one_minus;
        let shrink = sqrt_a * self.sigma0 * self.sigma0 / marginal_var;

        let logits: Vec<f64> = active
            .iter()
            .map(|&(k, w)| {
                let d2: f64 = z
                    .iter()
                    .zip(&self.components[k].mean)
                    .map(|(zi, mi)| (zi - sqrt_a * mi).powi(2))
                    .sum();
                w.ln() - 0.5 * d2 / marginal_var
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let resp = active
            .into_iter()
            .zip(exps)
            .map(|((k, _), e)| (k, e / norm))
            .collect();
        Ok(Posterior {
            resp,
            sqrt_a,
            noise_std,
            marginal_var,
            shrink,
        })
    }

    /// Responsibility-weighted component mean `sum_k r_k mu_k`.
    fn weighted_mean(&self, p: &Posterior) -> Vec<f64> {
        let mut mbar = vec![0.0; self.dim];
        for &(k, r) in &p.resp {
            for (m, mu) in mbar.iter_mut().zip(&self.components[k].mean) {
                *m += r * mu;
            }
        }
        mbar
    }

    fn check_dim(&self, z: &Latent) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape {
                expected: format!("{} values", self.dim),
                found: z.shape().to_string(),
            });
        }
        Ok(())
    }
}

impl Denoiser for GaussianMixture {
    fn name(&self) -> &str {
        "gm-oracle"
    }

    fn supports(&self, c: &Conditioning) -> bool {
        self.active(c).is_ok()
    }

    fn predict(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
    ) -> Result<Latent> {
        check_inputs(self, z, t, schedule, c)?;
        self.check_dim(z)?;
        let zs = z.as_slice();
        let p = self.posterior(zs, schedule.alpha_bar(t), c)?;
        let mbar = self.weighted_mean(&p);
        // posterior mean of z_0: mbar + shrink * (z - sqrt(a) mbar)
        let eps = zs
            .iter()
            .zip(&mbar)
            .map(|(zi, mi)| {
                let post = mi + p.shrink * (zi - p.sqrt_a * mi);
                (zi - p.sqrt_a * post) / p.noise_std
            })
            .collect();
        z.with_values(eps)
    }

    /// Closed form: `J = (1 - sqrt(a) shrink) / std * (I - a / v * Cov_r(mu))`,
    /// symmetric, so the vjp is `J u`.
    fn predict_vjp(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
        u: &Latent,
    ) -> Result<Latent> {
        check_inputs(self, z, t, schedule, c)?;
        self.check_dim(z)?;
        z.check_same_shape(u)?;
        let alpha_bar = schedule.alpha_bar(t);
        let p = self.posterior(z.as_slice(), alpha_bar, c)?;
        let mbar = self.weighted_mean(&p);
        let us = u.as_slice();
        let factor = (1.0 - p.sqrt_a * p.shrink) / p.noise_std;
        let coupling = alpha_bar / p.marginal_var;

        let mut cov_u = vec![0.0; self.dim];
        for &(k, r) in &p.resp {
            let d: Vec<f64> = self.components[k]
                .mean
                .iter()
                .zip(&mbar)
                .map(|(mu, m)| mu - m)
                .collect();
            let proj = r * dot(&d, us);
            for (acc, di) in cov_u.iter_mut().zip(&d) {
                *acc += proj * di;
            }
        }
        let out = us
            .iter()
            .zip(&cov_u)
            .map(|(ui, ci)| factor * (ui - coupling * ci))
            .collect();
        z.with_values(out)
    }
}
