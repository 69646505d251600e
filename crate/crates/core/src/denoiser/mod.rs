//! Noise predictors `eps_theta(z, t, c)` behind one contract.

mod mixture;
mod mlp;

pub use mixture::{GaussianMixture, MixtureComponent};
pub use mlp::{MlpDenoiser, TrainingConfig, TrainingOutcome, TIME_EMBED_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{dot, Latent};
use crate::schedule::NoiseSchedule;

/// Central-difference step of the generic vjp fallback.
pub const FD_STEP: f64 = 1e-5;

/// Control input `c`: a class label, an embedding, or the null conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Label(usize),
    Embedding(Vec<f64>),
    Null,
}

impl Conditioning {
    pub fn kind(&self) -> &'static str {
        match self {
            Conditioning::Label(_) => "class-label",
            Conditioning::Embedding(_) => "embedding",
            Conditioning::Null => "null",
        }
    }
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Conditioning::Label(k) => write!(f, "label:{k}"),
            Conditioning::Embedding(v) => write!(f, "embedding[{}]", v.len()),
            Conditioning::Null => f.write_str("null"),
        }
    }
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `c` is a conditioning this denoiser understands.
    fn supports(&self, c: &Conditioning) -> bool;

    /// Noise prediction at timestep `t` in `0..=T`.
    fn predict(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
    ) -> Result<Latent>;

    /// `u^T (d eps / d z)`. Defaults to central differences.
    fn predict_vjp(
        &self,
        z: &Latent,
        t: usize,
        schedule: &NoiseSchedule,
        c: &Conditioning,
        u: &Latent,
    ) -> Result<Latent> {
        finite_difference_vjp(self, z, t, schedule, c, u)
    }
}

pub(crate) fn check_inputs(
    d: &(impl Denoiser + ?Sized),
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
) -> Result<()> {
    if !d.supports(c) {
        return Err(Error::contract(format!(
            "{} does not support {} conditioning",
            d.name(),
            c.kind()
        )));
    }
    if t > schedule.steps() {
        return Err(Error::Index {
            t,
            max: schedule.steps(),
        });
    }
    if z.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("denoiser input".into()));
    }
    Ok(())
}

/// Vector-Jacobian product by central differences with step [`FD_STEP`].
pub fn finite_difference_vjp<D: Denoiser + ?Sized>(
    d: &D,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
    u: &Latent,
) -> Result<Latent> {
    z.check_same_shape(u)?;
    let mut probe = z.as_slice().to_vec();
    let mut out = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let hi = d.predict(&z.with_values(probe.clone())?, t, schedule, c)?;
        probe[i] = orig - FD_STEP;
        let lo = d.predict(&z.with_values(probe.clone())?, t, schedule, c)?;
        probe[i] = orig;
        out.push(
            (dot(u.as_slice(), hi.as_slice()) - dot(u.as_slice(), lo.as_slice())) / (2.0 * FD_STEP),
        );
    }
    z.with_values(out)
}

/// Classifier-free guidance: `eps_null + scale * (eps_c - eps_null)`.
pub fn cfg_predict(
    d: &dyn Denoiser,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
    scale: f64,
) -> Result<Latent> {
    require_null(d)?;
    let cond = d.predict(z, t, schedule, c)?;
    let null = d.predict(z, t, schedule, &Conditioning::Null)?;
    null.lincomb(1.0 - scale, &cond, scale)
}

/// Vjp of [`cfg_predict`], affine in the two branch vjps.
pub fn cfg_predict_vjp(
    d: &dyn Denoiser,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
    scale: f64,
    u: &Latent,
) -> Result<Latent> {
    require_null(d)?;
    let cond = d.predict_vjp(z, t, schedule, c, u)?;
    let null = d.predict_vjp(z, t, schedule, &Conditioning::Null, u)?;
    null.lincomb(1.0 - scale, &cond, scale)
}

fn require_null(d: &dyn Denoiser) -> Result<()> {
    if d.supports(&Conditioning::Null) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{} has no null conditioning for guidance",
            d.name()
        )))
    }
}

/// Guided prediction that skips the null branch when `scale == 1`.
pub fn guided_predict(
    d: &dyn Denoiser,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
    scale: f64,
) -> Result<Latent> {
    if scale == 1.0 {
        d.predict(z, t, schedule, c)
    } else {
        cfg_predict(d, z, t, schedule, c, scale)
    }
}

pub fn guided_vjp(
    d: &dyn Denoiser,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    c: &Conditioning,
    scale: f64,
    u: &Latent,
) -> Result<Latent> {
    if scale == 1.0 {
        d.predict_vjp(z, t, schedule, c, u)
    } else {
        cfg_predict_vjp(d, z, t, schedule, c, scale, u)
    }
}
