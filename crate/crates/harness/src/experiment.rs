//! Running every method on every instance and persisting the results.
//!
//! Output layout under the configured directory:
//!
//! | file | content |
//! |------|---------|
//! | `results.csv` | one [`ResultRow`] per (instance, method), columns in field order |
//! | `summary.json` | medians and quartiles per method ([`Summary`]) |
//! | `errors.txt` | one line per failed run; empty when nothing failed |
//! | `config.toml` | the resolved configuration |
//! | `reports/<method>/<id>.jsonl` | full per-run inversion report |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use dualinv::inversion::{dci_invert, ddim_invert, picard_invert, reconstruct};
use dualinv::metrics::{noise_gap, noise_gap_rms, psnr, recon_error, ssim, SsimParams};
use dualinv::{
    Denoiser, GaussianMixture, InversionConfig, InversionReport, Latent, MlpDenoiser,
    NoiseSchedule, Shape,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DenoiserChoice, ExperimentConfig, Method};
use crate::dataset::{build_mixture, dynamic_range, synth_dataset, Instance};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub instance_id: usize,
    pub method: String,
    pub config_hash: String,
    pub d_noi: f64,
    pub d_noi_rms: f64,
    pub d_rec: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub iterations_total: usize,
    pub denoiser_evals: usize,
    pub wall_time_ms: Option<f64>,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "instance_id",
    "method",
    "config_hash",
    "d_noi",
    "d_noi_rms",
    "d_rec",
    "psnr",
    "ssim",
    "iterations_total",
    "denoiser_evals",
    "wall_time_ms",
    "seed",
];

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub report: InversionReport,
    pub reconstruction: Latent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFailure {
    pub instance_id: usize,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub outcomes: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
}

impl Batch {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.outcomes.iter().map(|o| o.row.clone()).collect()
    }

    pub fn rows_for(&self, method: Method) -> Vec<&ResultRow> {
        self.outcomes
            .iter()
            .map(|o| &o.row)
            .filter(|r| r.method == method.as_str())
            .collect()
    }
}

/// Everything a run needs: schedule, mixture, denoiser, and the
/// synthesized instances.
pub struct Lab {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub mixture: GaussianMixture,
    pub instances: Vec<Instance>,
    pub peak: f64,
    denoiser: Box<dyn Denoiser>,
    pool: rayon::ThreadPool,
}

impl Lab {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let mixture = build_mixture(&config.dataset, config.seed)?;
        let denoiser: Box<dyn Denoiser> = match &config.denoiser {
            DenoiserChoice::Oracle => Box::new(mixture.clone()),
            DenoiserChoice::Mlp(path) => {
                let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
                let model = MlpDenoiser::read_from(std::io::BufReader::new(file))?;
                if model.shape() != config.dataset.shape.0 {
                    return Err(HarnessError::config(format!(
                        "model {} expects latents of shape {}, dataset has {}",
                        path.display(),
                        model.shape(),
                        config.dataset.shape.0
                    )));
                }
                Box::new(model)
            }
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| HarnessError::config(format!("worker pool: {e}")))?;
        let instances = pool.install(|| {
            synth_dataset(
                &config.dataset,
                &schedule,
                denoiser.as_ref(),
                config.seed,
                config.inversion.cfg_scale,
            )
        })?;
        let peak = config
            .metrics
            .peak
            .unwrap_or_else(|| dynamic_range(&instances));
        Ok(Self {
            config: config.clone(),
            schedule,
            mixture,
            instances,
            peak,
            denoiser,
            pool,
        })
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        self.denoiser.as_ref()
    }

    /// Runs `f` on the lab's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Inverts one instance with one method, reconstructs, and scores.
    pub fn run_method(
        &self,
        inst: &Instance,
        method: Method,
        inv: &InversionConfig,
        config_hash: &str,
    ) -> Result<RunOutcome> {
        let d = self.denoiser();
        let s = &self.schedule;
        let start = Instant::now();
        let mut report = match method {
            Method::Ddim => ddim_invert(&inst.z_0, s, d, &inst.source, inv.cfg_scale)?,
            Method::Picard => picard_invert(
                &inst.z_0,
                s,
                d,
                &inst.source,
                inv.rounds,
                inv.delta,
                inv.cfg_scale,
            )?,
            Method::Spd | Method::Dci => {
                let cfg = InversionConfig {
                    lambda: if method == Method::Spd {
                        0.0
                    } else {
                        inv.lambda
                    },
                    ..inv.clone()
                };
                let reference = inst.reference(cfg.reference_mode, s)?;
                dci_invert(&inst.z_0, s, d, &inst.source, &cfg, &reference)?
            }
        };
        report.method = method.as_str().to_string();
        let reconstruction = reconstruct(&report.z_t, s, d, &inst.source, inv.cfg_scale)?;
        let elapsed = start.elapsed();

        let ssim_value = match inst.z_0.shape() {
            Shape::Image { height, width }
                if height.min(width) >= self.config.metrics.ssim_window =>
            {
                let params = SsimParams {
                    window: self.config.metrics.ssim_window,
                    ..SsimParams::for_range(self.peak)
                };
                Some(ssim(&inst.z_0, &reconstruction, &params)?)
            }
            _ => None,
        };
        let row = ResultRow {
            instance_id: inst.id,
            method: method.as_str().to_string(),
            config_hash: config_hash.to_string(),
            d_noi: noise_gap(&report.z_t, &inst.z_t_star)?,
            d_noi_rms: noise_gap_rms(&report.z_t, &inst.z_t_star)?,
            d_rec: recon_error(&inst.z_0, &reconstruction)?,
            psnr: psnr(&inst.z_0, &reconstruction, self.peak)?,
            ssim: ssim_value,
            iterations_total: report.total_iterations(),
            denoiser_evals: report.denoiser_evals,
            wall_time_ms: self.config.timing.then_some(elapsed.as_secs_f64() * 1e3),
            seed: self.config.seed,
        };
        Ok(RunOutcome {
            row,
            report,
            reconstruction,
        })
    }

    /// Every configured method on every instance, with `inv` as the
    /// inversion parameters. Results are ordered by instance, then by the
    /// configured method order, regardless of scheduling.
    pub fn run_all(&self, inv: &InversionConfig, config_hash: &str) -> Batch {
        let methods = &self.config.methods;
        let results: Vec<(usize, Method, Result<RunOutcome>)> = self.install(|| {
            self.instances
                .par_iter()
                .flat_map_iter(|inst| {
                    methods
                        .iter()
                        .map(move |&m| (inst.id, m, self.run_method(inst, m, inv, config_hash)))
                })
                .collect()
        });
        let mut batch = Batch::default();
        for (instance_id, method, res) in results {
            match res {
                Ok(o) => batch.outcomes.push(o),
                Err(e) => batch.failures.push(RunFailure {
                    instance_id,
                    method,
                    error: e.to_string(),
                }),
            }
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

impl Quantiles {
    /// Linear-interpolation quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub d_noi: Option<Quantiles>,
    pub d_noi_rms: Option<Quantiles>,
    pub d_rec: Option<Quantiles>,
    pub psnr: Option<Quantiles>,
    pub ssim: Option<Quantiles>,
    pub iterations_total: Option<Quantiles>,
    pub denoiser_evals: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub instances: usize,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn new(config: &ExperimentConfig, batch: &Batch) -> Self {
        let methods = config
            .methods
            .iter()
            .map(|&m| {
                let rows = batch.rows_for(m);
                let col = |f: fn(&ResultRow) -> f64| {
                    Quantiles::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                let ssim: Vec<f64> = rows.iter().filter_map(|r| r.ssim).collect();
                MethodSummary {
                    method: m.to_string(),
                    runs: rows.len(),
                    failures: batch.failures.iter().filter(|f| f.method == m).count(),
                    d_noi: col(|r| r.d_noi),
                    d_noi_rms: col(|r| r.d_noi_rms),
                    d_rec: col(|r| r.d_rec),
                    psnr: col(|r| r.psnr),
                    ssim: Quantiles::of(&ssim),
                    iterations_total: col(|r| r.iterations_total as f64),
                    denoiser_evals: col(|r| r.denoiser_evals as f64),
                }
            })
            .collect();
        Self {
            config_hash: config.config_hash(),
            seed: config.seed,
            instances: config.dataset.instances,
            methods,
        }
    }

    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub batch: Batch,
    pub summary: Summary,
}

/// Synthesizes the dataset, runs every method on every instance, and
/// writes the result files. Failed runs are recorded, not fatal.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let lab = Lab::new(config)?;
    let hash = config.config_hash();
    let batch = lab.run_all(&config.inversion, &hash);
    let summary = Summary::new(config, &batch);
    write_results(&config.output_dir, config, &batch, &summary)?;
    Ok(ExperimentOutcome { batch, summary })
}

pub fn write_results(
    dir: &Path,
    config: &ExperimentConfig,
    batch: &Batch,
    summary: &Summary,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_csv(&dir.join("results.csv"), &CSV_COLUMNS, &batch.rows())?;
    write_text(
        &dir.join("summary.json"),
        &(serde_json::to_string_pretty(summary)? + "\n"),
    )?;
    let errors: String = batch
        .failures
        .iter()
        .map(|f| {
            format!(
                "instance {} method {}: {}\n",
                f.instance_id, f.method, f.error
            )
        })
        .collect();
    write_text(&dir.join("errors.txt"), &errors)?;
    write_text(&dir.join("config.toml"), &config.to_toml())?;

    let reports = dir.join("reports");
    for outcome in &batch.outcomes {
        let sub = reports.join(&outcome.row.method);
        fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
        let path = sub.join(format!("{:04}.jsonl", outcome.row.instance_id));
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        outcome.report.write_jsonl(&mut w, config.timing)?;
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

/// Writes a header row (also for zero rows) followed by `rows`.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Err(HarnessError::MissingResults(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    Ok(rows)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
