//! One-parameter ablation sweeps over the inversion settings.

use serde::{Deserialize, Serialize};

use crate::config::{apply_param, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::experiment::{write_csv, write_text, Lab, RunFailure, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub method: String,
    pub config_hash: String,
    pub runs: usize,
    pub failures: usize,
    pub d_noi_median: Option<f64>,
    pub d_rec_median: Option<f64>,
    pub d_rec_q1: Option<f64>,
    pub d_rec_q3: Option<f64>,
    pub psnr_median: Option<f64>,
    pub iterations_median: Option<f64>,
}

const SWEEP_COLUMNS: [&str; 12] = [
    "param",
    "value",
    "method",
    "config_hash",
    "runs",
    "failures",
    "d_noi_median",
    "d_rec_median",
    "d_rec_q1",
    "d_rec_q3",
    "psnr_median",
    "iterations_median",
];

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub param: String,
    /// Ascending by value; within a value, in configured method order.
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<(f64, Summary)>,
    pub failures: Vec<(f64, RunFailure)>,
}

/// Runs the lab's methods once per value, all other settings at the lab's
/// configuration. The dataset is shared across values.
pub fn sweep_with_lab(lab: &Lab, param: &str, values: &[f64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(HarnessError::config("sweep needs at least one value"));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let mut out = SweepOutcome {
        param: param.to_string(),
        rows: Vec::new(),
        summaries: Vec::new(),
        failures: Vec::new(),
    };
    for value in values {
        let config = ExperimentConfig {
            inversion: apply_param(&lab.config.inversion, param, value)?,
            ..lab.config.clone()
        };
        let hash = config.config_hash();
        let batch = lab.run_all(&config.inversion, &hash);
        let summary = Summary::new(&config, &batch);
        for m in &summary.methods {
            out.rows.push(SweepRow {
                param: param.to_string(),
                value,
                method: m.method.clone(),
                config_hash: hash.clone(),
                runs: m.runs,
                failures: m.failures,
                d_noi_median: m.d_noi.map(|q| q.median),
                d_rec_median: m.d_rec.map(|q| q.median),
                d_rec_q1: m.d_rec.map(|q| q.q1),
                d_rec_q3: m.d_rec.map(|q| q.q3),
                psnr_median: m.psnr.map(|q| q.median),
                iterations_median: m.iterations_total.map(|q| q.median),
            });
        }
        out.failures
            .extend(batch.failures.into_iter().map(|f| (value, f)));
        out.summaries.push((value, summary));
    }
    Ok(out)
}

/// Sweeps the configured `sweep.param` over `sweep.values` and writes
/// `sweep_<param>.csv` (plus `sweep_<param>_errors.txt`) to the output
/// directory.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let sweep = config.sweep.as_ref().ok_or_else(|| {
        HarnessError::config("no sweep configured (set sweep.param and sweep.values)")
    })?;
    let lab = Lab::new(config)?;
    let out = sweep_with_lab(&lab, &sweep.param, &sweep.values)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_csv(
        &dir.join(format!("sweep_{}.csv", sweep.param)),
        &SWEEP_COLUMNS,
        &out.rows,
    )?;
    let errors: String = out
        .failures
        .iter()
        .map(|(v, f)| {
            format!(
                "{}={v} instance {} method {}: {}\n",
                sweep.param, f.instance_id, f.method, f.error
            )
        })
        .collect();
    write_text(
        &dir.join(format!("sweep_{}_errors.txt", sweep.param)),
        &errors,
    )?;
    Ok(out)
}
