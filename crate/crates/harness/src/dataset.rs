//! Synthetic instances with known ideal noise.
//!
//! Randomness comes from one ChaCha8 generator per purpose, all keyed by the
//! base seed: stream 0 builds the mixture, stream `i + 1` drives instance `i`.
//! Instances therefore do not depend on how many workers run or in which
//! order.

use std::io::Write;

use dualinv::denoiser::{guided_predict, MixtureComponent};
use dualinv::inversion::extract_reference;
use dualinv::schedule::ddim_step;
use dualinv::{
    Conditioning, Denoiser, GaussianMixture, Latent, NoiseSchedule, ReferenceMode, ReferenceNoise,
    Shape,
};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetConfig, IdealConditioning};
use crate::error::{HarnessError, Result};

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// The dataset's mixture. Component `label * subcomponents + j` is the
/// `j`-th component of class `label`; all weights are equal.
pub fn build_mixture(cfg: &DatasetConfig, seed: u64) -> Result<GaussianMixture> {
    let mut rng = stream_rng(seed, 0);
    let dim = cfg.shape.0.len();
    let total = cfg.labels * cfg.subcomponents;
    let mut components = Vec::with_capacity(total);
    for label in 0..cfg.labels {
        let centre = gaussian_vec(&mut rng, dim, cfg.center_scale);
        for _ in 0..cfg.subcomponents {
            let mean = centre
                .iter()
                .zip(gaussian_vec(&mut rng, dim, cfg.spread))
                .map(|(c, o)| c + o)
                .collect();
            components.push(MixtureComponent::new(1.0 / total as f64, mean, Some(label)));
        }
    }
    Ok(GaussianMixture::new(components, cfg.sigma0)?)
}

/// Stream reserved for training data, disjoint from the instance streams.
const TRAINING_STREAM: u64 = u64::MAX;

/// Draws `n` clean latents from the mixture prior, each paired with its
/// class label.
pub fn training_set(
    mixture: &GaussianMixture,
    shape: Shape,
    n: usize,
    seed: u64,
) -> Result<Vec<(Latent, Conditioning)>> {
    let mut rng = stream_rng(seed, TRAINING_STREAM);
    let components = mixture.components();
    let pick = WeightedIndex::new(components.iter().map(|c| c.weight))
        .map_err(|e| HarnessError::config(format!("mixture weights: {e}")))?;
    (0..n)
        .map(|_| {
            let k = rng.sample(&pick);
            let c = &components[k];
            let noise = gaussian_vec(&mut rng, shape.len(), mixture.sigma0());
            let z: Vec<f64> = c.mean.iter().zip(noise).map(|(m, e)| m + e).collect();
            let cond = c.label.map_or(Conditioning::Null, Conditioning::Label);
            Ok((Latent::new(z, shape)?, cond))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub label: usize,
    pub component: usize,
    /// Ideal terminal noise the instance was generated from.
    pub z_t_star: Latent,
    pub z_0: Latent,
    /// Conditioning used for generation.
    pub ideal: Conditioning,
    /// Conditioning available to inversion and reconstruction.
    pub source: Conditioning,
    /// `eps_trace[t - 1]` is the noise prediction used by the sampling step at `t`.
    pub eps_trace: Vec<Latent>,
}

impl Instance {
    /// The noise of the one-shot forward process linking the pair:
    /// `z_T* = sqrt(a_T) z_0 + sqrt(1 - a_T) eps`.
    pub fn ground_truth_noise(&self, schedule: &NoiseSchedule) -> Result<Latent> {
        let a = schedule.alpha_bar(schedule.steps());
        let s = (1.0 - a).sqrt();
        Ok(self.z_t_star.lincomb(1.0 / s, &self.z_0, -a.sqrt() / s)?)
    }

    pub fn reference(
        &self,
        mode: ReferenceMode,
        schedule: &NoiseSchedule,
    ) -> Result<ReferenceNoise> {
        let truth = match mode {
            ReferenceMode::Oracle => Some(self.ground_truth_noise(schedule)?),
            ReferenceMode::Whitened => None,
        };
        Ok(extract_reference(&self.z_0, mode, truth.as_ref())?)
    }
}

/// Draws every instance: its class (round-robin), its component within the
/// class, and `z_T*` from the standard normal, then samples `z_0` by
/// deterministic DDIM under the ideal conditioning.
pub fn synth_dataset(
    cfg: &DatasetConfig,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
    cfg_scale: f64,
) -> Result<Vec<Instance>> {
    if cfg.instances == 0 {
        return Err(HarnessError::config("dataset.instances must be at least 1"));
    }
    (0..cfg.instances)
        .into_par_iter()
        .map(|id| synth_instance(cfg, schedule, denoiser, seed, cfg_scale, id))
        .collect()
}

fn synth_instance(
    cfg: &DatasetConfig,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
    cfg_scale: f64,
    id: usize,
) -> Result<Instance> {
    let mut rng = stream_rng(seed, id as u64 + 1);
    let label = id % cfg.labels;
    let component = label * cfg.subcomponents + rng.random_range(0..cfg.subcomponents);
    let shape: Shape = cfg.shape.0;
    let z_t_star = Latent::new(gaussian_vec(&mut rng, shape.len(), 1.0), shape)?;
    let source = Conditioning::Label(label);
    let ideal = match cfg.ideal_conditioning {
        IdealConditioning::Label => source.clone(),
        IdealConditioning::Component => {
            let mut onehot = vec![0.0; cfg.labels * cfg.subcomponents];
            onehot[component] = 1.0;
            Conditioning::Embedding(onehot)
        }
    };
    let fail = |source| HarnessError::Synthesis {
        instance: id,
        source,
    };

    let steps = schedule.steps();
    let mut trace = vec![None; steps];
    let mut z = z_t_star.clone();
    for t in (1..=steps).rev() {
        let eps = guided_predict(denoiser, &z, t, schedule, &ideal, cfg_scale).map_err(fail)?;
        z = ddim_step(&z, &eps, schedule, t).map_err(fail)?;
        trace[t - 1] = Some(eps);
    }
    Ok(Instance {
        id,
        label,
        component,
        z_t_star,
        z_0: z,
        ideal,
        source,
        eps_trace: trace
            .into_iter()
            .map(|e| e.expect("every step ran"))
            .collect(),
    })
}

#[derive(Serialize)]
struct InstanceRecord<'a> {
    id: usize,
    label: usize,
    component: usize,
    shape: String,
    #[serde(rename = "z_T_star")]
    z_t_star: &'a [f64],
    z_0: &'a [f64],
}

/// One JSON object per line; the noise trace is not written (it is
/// regenerated exactly from the seed).
pub fn write_instances<W: Write>(mut w: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        let rec = InstanceRecord {
            id: inst.id,
            label: inst.label,
            component: inst.component,
            shape: String::from(crate::config::LatentShape(inst.z_0.shape())),
            z_t_star: inst.z_t_star.as_slice(),
            z_0: inst.z_0.as_slice(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")
            .map_err(|e| HarnessError::io("<instances>", e))?;
    }
    Ok(())
}

/// Value range of all clean latents, the default PSNR peak.
pub fn dynamic_range(instances: &[Instance]) -> f64 {
    let (lo, hi) = instances
        .iter()
        .flat_map(|i| i.z_0.as_slice())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}
