use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The known noise of a synthesized instance.
    Oracle,
    /// Zero-mean unit-variance transform of the source latent.
    Whitened,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ReferenceMode::Oracle),
            "whitened" => Ok(ReferenceMode::Whitened),
            other => Err(Error::param(
                "reference_mode",
                format!("`{other}` is not oracle or whitened"),
            )),
        }
    }
}

/// Reference noise `eps_ref`, computed once per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNoise {
    pub values: Latent,
    pub provenance: ReferenceMode,
}

pub fn extract_reference(
    z_0: &Latent,
    mode: ReferenceMode,
    ground_truth_eps: Option<&Latent>,
) -> Result<ReferenceNoise> {
    let values = match mode {
        ReferenceMode::Oracle => {
            let eps = ground_truth_eps.ok_or_else(|| {
                Error::contract("oracle reference needs the instance's ground-truth noise")
            })?;
            z_0.check_same_shape(eps)?;
            eps.clone()
        }
        ReferenceMode::Whitened => {
            let xs = z_0.as_slice();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::contract(
                    "whitened reference of a zero-variance latent",
                ));
            }
            let std = var.sqrt();
            z_0.with_values(xs.iter().map(|x| (x - mean) / std).collect())?
        }
    };
    Ok(ReferenceNoise {
        values,
        provenance: mode,
    })
}

/// One gradient step on `L_ref = ||eps_raw - eps_ref||_2` with respect to
/// `eps_raw`. Returns the corrected noise and `L_ref`.
///
/// The norm's gradient is the unit difference, so the step has length
/// `lambda` unless the two already coincide (zero subgradient).
pub fn reference_correction(
    eps_raw: &Latent,
    eps_ref: &ReferenceNoise,
    lambda: f64,
) -> Result<(Latent, f64)> {
    eps_raw.check_same_shape(&eps_ref.values)?;
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be nonnegative"));
    }
    let mut tape = Tape::new();
    let raw = tape.leaf(eps_raw.as_slice().to_vec());
    let reference = tape.constant(eps_ref.values.as_slice().to_vec());
    let diff = tape.sub(raw, reference);
    let loss = tape.norm(diff);
    let l_ref = tape.scalar(loss);
    let grad = tape.grad(loss)?;
    let corrected = eps_raw
        .as_slice()
        .iter()
        .zip(grad.get(raw))
        .map(|(e, g)| e - lambda * g)
        .collect();
    Ok((eps_raw.with_values(corrected)?, l_ref))
}
