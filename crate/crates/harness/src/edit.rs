//! Condition-swap editing demo.
//!
//! Each instance is inverted under its own label and sampled back under the
//! next label. An edit "lands" when the result is closer to the target
//! class's prior mean than to the source class's.

use dualinv::inversion::edit_condition_swap;
use dualinv::{Conditioning, Latent};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{write_csv, Lab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRow {
    pub instance_id: usize,
    pub source_label: usize,
    pub target_label: usize,
    pub dist_source: f64,
    pub dist_target: f64,
    pub lands_on_target: bool,
}

const EDIT_COLUMNS: [&str; 6] = [
    "instance_id",
    "source_label",
    "target_label",
    "dist_source",
    "dist_target",
    "lands_on_target",
];

#[derive(Debug, Clone, Default)]
pub struct EditSummary {
    pub rows: Vec<EditRow>,
    pub failures: Vec<(usize, String)>,
}

impl EditSummary {
    /// Fraction of successful edits that landed on the target; failed edits
    /// count as misses.
    pub fn success_rate(&self) -> f64 {
        let total = self.rows.len() + self.failures.len();
        if total == 0 {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.lands_on_target).count() as f64 / total as f64
    }
}

fn distance(a: &Latent, b: &[f64]) -> f64 {
    a.as_slice()
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn edit_demo(lab: &Lab) -> Result<EditSummary> {
    let labels = lab.config.dataset.labels;
    if labels < 2 {
        return Err(HarnessError::config("editing needs dataset.labels >= 2"));
    }
    let means: Vec<Vec<f64>> = (0..labels)
        .map(|l| lab.mixture.conditional_mean(&Conditioning::Label(l)))
        .collect::<std::result::Result<_, _>>()?;
    let inv = &lab.config.inversion;
    let results: Vec<(usize, Result<EditRow>)> = lab.install(|| {
        lab.instances
            .par_iter()
            .map(|inst| {
                let run = || -> Result<EditRow> {
                    let src = inst.label;
                    let tgt = (src + 1) % labels;
                    let reference = inst.reference(inv.reference_mode, &lab.schedule)?;
                    let out = edit_condition_swap(
                        &inst.z_0,
                        &lab.schedule,
                        lab.denoiser(),
                        &Conditioning::Label(src),
                        &Conditioning::Label(tgt),
                        inv,
                        &reference,
                    )?;
                    let dist_source = distance(&out.edited, &means[src]);
                    let dist_target = distance(&out.edited, &means[tgt]);
                    Ok(EditRow {
                        instance_id: inst.id,
                        source_label: src,
                        target_label: tgt,
                        dist_source,
                        dist_target,
                        lands_on_target: dist_target < dist_source,
                    })
                };
                (inst.id, run())
            })
            .collect()
    });
    let mut summary = EditSummary::default();
    for (id, res) in results {
        match res {
            Ok(row) => summary.rows.push(row),
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    Ok(summary)
}

/// Runs the demo and writes `edits.csv` to the output directory.
pub fn run_edit(lab: &Lab) -> Result<EditSummary> {
    let summary = edit_demo(lab)?;
    let dir = &lab.config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_csv(&dir.join("edits.csv"), &EDIT_COLUMNS, &summary.rows)?;
    Ok(summary)
}
