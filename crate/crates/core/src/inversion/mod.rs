//! Inversion methods: naive DDIM, Picard iteration, and the dual-conditioned
//! loop (reference-guided noise correction + fixed-point latent refinement),
//! plus deterministic reconstruction and a condition-swap edit.

mod methods;
mod reference;
mod refine;
mod report;

pub use methods::{
    dci_invert, ddim_invert, edit_condition_swap, picard_invert, reconstruct, sample_from,
    EditOutcome,
};
pub use reference::{extract_reference, reference_correction, ReferenceMode, ReferenceNoise};
pub use refine::{fixed_point_loss, fixed_point_refine, FixedPointProblem, RefineOutcome};
pub use report::{InversionReport, StepRecord, StopReason};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyper-parameters of the dual-conditioned inversion loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Maximum optimisation rounds per timestep (`K`).
    #[serde(alias = "K")]
    pub rounds: usize,
    /// Reference correction strength.
    pub lambda: f64,
    /// Fixed-point refinement learning rate.
    pub eta: f64,
    /// Convergence threshold on the fixed-point loss.
    pub delta: f64,
    pub cfg_scale: f64,
    /// Later rounds start from the refined latent instead of re-deriving it
    /// from `z_{t-1}`.
    pub carry_forward: bool,
    /// Use the corrected noise inside the fixed-point map.
    pub corrected_fix: bool,
    pub reference_mode: ReferenceMode,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            lambda: 2.0,
            eta: 1e-3,
            delta: 1e-5,
            cfg_scale: 1.0,
            carry_forward: true,
            corrected_fix: false,
            reference_mode: ReferenceMode::Oracle,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::param("rounds", "K must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", "must be finite and nonnegative"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::param("eta", "must be positive"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::param("delta", "must be positive"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::param("cfg_scale", "must be finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = InversionConfig::default();
        assert_eq!((c.rounds, c.lambda, c.eta), (5, 2.0, 1e-3));
        assert!(c.validate().is_ok());
        for bad in [
            InversionConfig {
                rounds: 0,
                ..c.clone()
            },
            InversionConfig {
                lambda: -1.0,
                ..c.clone()
            },
            InversionConfig {
                eta: 0.0,
                ..c.clone()
            },
            InversionConfig {
                delta: 0.0,
                ..c.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Parameter { .. })));
        }
    }
}
