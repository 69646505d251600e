//! Per-run inversion reports.
//!
//! Serialized as JSON lines: one `run` record, then one `step` record per
//! timestep in increasing `t`. Field names are stable.
//!
//! ```text
//! {"record":"run","method":"dci","denoiser_evals":812,"z_T":[...],"config":{...}}
//! {"record":"step","t":1,"iterations":5,"stop":"max_rounds","l_ref":[...],"l_fix":[...]}
//! ```

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::InversionConfig;
use crate::error::Result;
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `L_fix` fell below the threshold.
    Converged,
    /// All rounds used.
    MaxRounds,
    /// Method takes exactly one update per step.
    SingleStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub iterations: usize,
    pub l_ref: Vec<f64>,
    pub l_fix: Vec<f64>,
    pub stop: StopReason,
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub method: String,
    pub z_t: Latent,
    pub steps: Vec<StepRecord>,
    pub wall_time: Duration,
    pub denoiser_evals: usize,
    pub config: Option<InversionConfig>,
}

impl InversionReport {
    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }

    /// Writes the JSON-lines form. Wall time is included only when asked,
    /// so that reports of identical runs can be byte-identical.
    pub fn write_jsonl<W: Write>(&self, mut w: W, include_timing: bool) -> Result<()> {
        let mut run = json!({
            "record": "run",
            "method": self.method,
            "denoiser_evals": self.denoiser_evals,
            "total_iterations": self.total_iterations(),
            "z_T": self.z_t.as_slice(),
            "config": self.config,
        });
        if include_timing {
            run["wall_time_ms"] = json!(self.wall_time.as_secs_f64() * 1e3);
        }
        writeln!(
            w,
            "{}",
            serde_json::to_string(&run).expect("report serializes")
        )?;
        for step in &self.steps {
            let mut rec = serde_json::to_value(step).expect("step serializes");
            rec.as_object_mut()
                .expect("step is an object")
                .insert("record".into(), json!("step"));
            writeln!(
                w,
                "{}",
                serde_json::to_string(&rec).expect("step serializes")
            )?;
        }
        Ok(())
    }
}
