//! Experiment configuration.
//!
//! Configs are TOML files whose keys may be written dotted
//! (`schedule.T = 50`) or as sections. Precedence, lowest first: built-in
//! defaults, the file, the `DUALINV_SEED` environment variable (base seed
//! only), then `--set key=value` overrides from the command line.
//!
//! ```toml
//! seed = 7
//! output_dir = "results"
//! methods = ["ddim", "picard", "spd", "dci"]
//! denoiser = "gm-oracle"          # or "mlp:path/to/model.txt"
//! schedule.T = 50
//! dataset.instances = 100
//! dataset.shape = "32x32"         # "HxW" for images, "N" for flat vectors
//! inversion.K = 5
//! inversion.lambda = 2.0
//! sweep.param = "eta"
//! sweep.values = [1e-4, 1e-3, 1e-2]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dualinv::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use dualinv::{InversionConfig, NoiseSchedule, Shape};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const SEED_ENV: &str = "DUALINV_SEED";

/// Inversion parameters a sweep may vary.
pub const SWEEPABLE: [&str; 5] = ["eta", "lambda", "K", "delta", "cfg_scale"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
    /// Record wall time in CSV rows and reports (breaks byte-identical reruns).
    pub timing: bool,
    pub denoiser: DenoiserChoice,
    pub methods: Vec<Method>,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub inversion: InversionConfig,
    pub metrics: MetricsConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("results"),
            workers: 0,
            timing: false,
            denoiser: DenoiserChoice::Oracle,
            methods: vec![Method::Ddim, Method::Picard, Method::Spd, Method::Dci],
            schedule: ScheduleConfig::default(),
            dataset: DatasetConfig::default(),
            inversion: InversionConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| HarnessError::config(e.to_string()))
    }
}

/// Which conditioning generates the instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdealConditioning {
    /// The class label, the same conditioning inversion uses.
    Label,
    /// A one-hot embedding of the instance's mixture component, finer than
    /// the class label inversion sees.
    Component,
}

/// A synthetic Gaussian-mixture dataset: `labels` classes, each with
/// `subcomponents` isotropic components. Class centres are drawn with
/// per-coordinate scale `center_scale`, component means scatter around
/// their centre with scale `spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub instances: usize,
    pub shape: LatentShape,
    pub labels: usize,
    pub subcomponents: usize,
    pub center_scale: f64,
    pub spread: f64,
    pub sigma0: f64,
    pub ideal_conditioning: IdealConditioning,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            shape: LatentShape(Shape::Image {
                height: 32,
                width: 32,
            }),
            labels: 2,
            subcomponents: 4,
            center_scale: 1.0,
            spread: 1.0,
            sigma0: 0.5,
            ideal_conditioning: IdealConditioning::Component,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// PSNR peak and SSIM dynamic range; defaults to the value range of the
    /// synthesized clean latents.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak: Option<f64>,
    pub ssim_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            peak: None,
            ssim_window: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddim,
    Picard,
    Spd,
    Dci,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::Picard => "picard",
            Method::Spd => "spd",
            Method::Dci => "dci",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Method::Ddim),
            "picard" => Ok(Method::Picard),
            "spd" => Ok(Method::Spd),
            "dci" => Ok(Method::Dci),
            other => Err(HarnessError::config(format!(
                "unknown method `{other}` (expected ddim, picard, spd or dci)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DenoiserChoice {
    /// The dataset's own mixture, exact.
    Oracle,
    /// A trained network loaded from a parameter file.
    Mlp(PathBuf),
}

impl TryFrom<String> for DenoiserChoice {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "gm-oracle" {
            return Ok(DenoiserChoice::Oracle);
        }
        match s.strip_prefix("mlp:") {
            Some(path) if !path.is_empty() => Ok(DenoiserChoice::Mlp(PathBuf::from(path))),
            _ => Err(format!(
                "denoiser `{s}` is neither gm-oracle nor mlp:<path>"
            )),
        }
    }
}

impl From<DenoiserChoice> for String {
    fn from(d: DenoiserChoice) -> String {
        match d {
            DenoiserChoice::Oracle => "gm-oracle".into(),
            DenoiserChoice::Mlp(p) => format!("mlp:{}", p.display()),
        }
    }
}

/// Latent shape written as `"HxW"` or `"N"` (a bare integer also works).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeSpec", into = "String")]
pub struct LatentShape(pub Shape);

#[derive(Deserialize)]
#[serde(untagged)]
enum ShapeSpec {
    Len(u64),
    Text(String),
}

impl TryFrom<ShapeSpec> for LatentShape {
    type Error = String;

    fn try_from(spec: ShapeSpec) -> Result<Self, String> {
        match spec {
            ShapeSpec::Len(n) => LatentShape::try_from(n.to_string()),
            ShapeSpec::Text(s) => LatentShape::try_from(s),
        }
    }
}

impl TryFrom<String> for LatentShape {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let bad = || format!("shape `{s}` is not `N` or `HxW`");
        let shape = match s.split_once('x') {
            Some((h, w)) => Shape::Image {
                height: h.trim().parse().map_err(|_| bad())?,
                width: w.trim().parse().map_err(|_| bad())?,
            },
            None => Shape::Flat(s.trim().parse().map_err(|_| bad())?),
        };
        if shape.is_empty() {
            return Err(bad());
        }
        Ok(LatentShape(shape))
    }
}

impl From<LatentShape> for String {
    fn from(s: LatentShape) -> String {
        match s.0 {
            Shape::Flat(n) => n.to_string(),
            Shape::Image { height, width } => format!("{height}x{width}"),
        }
    }
}

impl ExperimentConfig {
    /// Reads and resolves a config. `env_seed` is the raw value of
    /// [`SEED_ENV`], if set.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| HarnessError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(raw) = env_seed {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                HarnessError::config(format!("{SEED_ENV}=`{raw}` is not an integer"))
            })?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                HarnessError::config(format!("override `{item}` is not key=value"))
            })?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.inversion
            .validate()
            .map_err(|e| HarnessError::config(e.to_string()))?;
        let d = &self.dataset;
        if d.instances == 0 {
            return Err(HarnessError::config("dataset.instances must be at least 1"));
        }
        if d.labels == 0 || d.subcomponents == 0 {
            return Err(HarnessError::config(
                "dataset.labels and dataset.subcomponents must be at least 1",
            ));
        }
        if !(d.sigma0 > 0.0 && d.sigma0.is_finite()) {
            return Err(HarnessError::config("dataset.sigma0 must be positive"));
        }
        if !(d.spread >= 0.0 && d.center_scale >= 0.0)
            || !(d.spread.is_finite() && d.center_scale.is_finite())
        {
            return Err(HarnessError::config(
                "dataset.spread and dataset.center_scale must be finite and nonnegative",
            ));
        }
        if matches!(self.denoiser, DenoiserChoice::Mlp(_))
            && d.ideal_conditioning == IdealConditioning::Component
        {
            return Err(HarnessError::config(
                "a trained denoiser only understands class labels; set dataset.ideal_conditioning = \"label\"",
            ));
        }
        if let Some(peak) = self.metrics.peak {
            if !(peak > 0.0 && peak.is_finite()) {
                return Err(HarnessError::config("metrics.peak must be positive"));
            }
        }
        if self.metrics.ssim_window == 0 {
            return Err(HarnessError::config("metrics.ssim_window must be positive"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(HarnessError::config(format!("method `{m}` listed twice")));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::config("sweep.values is empty"));
            }
            for &v in &sweep.values {
                apply_param(&self.inversion, &sweep.param, v)?;
            }
        }
        Ok(())
    }

    /// Hash of everything that determines a run's results. Output location,
    /// worker count, the timing flag and the sweep spec are left out.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.workers = 0;
        canonical.timing = false;
        canonical.sweep = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Returns `base` with one sweepable parameter replaced.
pub fn apply_param(base: &InversionConfig, param: &str, value: f64) -> Result<InversionConfig> {
    let mut c = base.clone();
    match param {
        "eta" => c.eta = value,
        "lambda" => c.lambda = value,
        "delta" => c.delta = value,
        "cfg_scale" => c.cfg_scale = value,
        "K" | "rounds" => {
            if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                return Err(HarnessError::config(format!(
                    "K = {value} is not a positive integer"
                )));
            }
            c.rounds = value as usize;
        }
        other => {
            return Err(HarnessError::config(format!(
                "cannot sweep `{other}` (expected one of {})",
                SWEEPABLE.join(", ")
            )))
        }
    }
    c.validate()
        .map_err(|e| HarnessError::config(e.to_string()))?;
    Ok(c)
}

fn parse_value(raw: &str) -> toml::Value {
    if let Ok(mut t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if raw.contains(',') {
        return toml::Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(HarnessError::config(format!("empty override key `{key}`")));
    };
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::config(format!("`{part}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
