use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualinv::denoiser::TrainingConfig;
use dualinv::MlpDenoiser;
use dualinv_harness::config::{SweepConfig, SEED_ENV};
use dualinv_harness::dataset::{build_mixture, training_set, write_instances};
use dualinv_harness::edit::run_edit;
use dualinv_harness::experiment::{read_rows, Quantiles};
use dualinv_harness::{
    emit_plots, run_experiment, run_sweep, ExperimentConfig, HarnessError, Lab, Method, Result,
};

#[derive(Parser)]
#[command(
    name = "dualinv",
    version,
    about = "Run diffusion inversion experiments"
)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set inversion.eta=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset and write `instances.jsonl`.
    Synth,
    /// Train an MLP denoiser on samples of the dataset's mixture.
    Train(TrainArgs),
    /// Invert one instance and print its report as JSON lines.
    Invert(OneRun),
    /// Invert and reconstruct one instance and print its result row.
    Reconstruct(OneRun),
    /// Condition-swap editing demo; writes `edits.csv`.
    Edit,
    /// Full experiment: every method on every instance.
    Run,
    /// Ablation sweep over one inversion parameter.
    Sweep(SweepArgs),
    /// Plot an existing results directory.
    Plot,
    /// Print per-method medians from an existing `results.csv`.
    Report,
}

#[derive(Args)]
struct OneRun {
    #[arg(long, default_value = "dci")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    instance: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Where to write the model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// Parameter to vary (overrides `sweep.param`).
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values (overrides `sweep.values`).
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={:?}", out.display().to_string()));
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    ExperimentConfig::load(cli.config.as_deref(), &overrides, env_seed.as_deref())
}

fn ensure_dir(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.clone(),
        source: e,
    })
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::Io { path, source: e })
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load(&cli)?;
    match cli.command {
        Command::Synth => {
            let lab = Lab::new(&config)?;
            ensure_dir(&config)?;
            let path = config.output_dir.join("instances.jsonl");
            let mut w = create(path.clone())?;
            write_instances(&mut w, &lab.instances)?;
            w.flush().map_err(|e| HarnessError::Io {
                path: path.clone(),
                source: e,
            })?;
            println!(
                "wrote {} instances to {}",
                lab.instances.len(),
                path.display()
            );
        }
        Command::Train(args) => {
            let schedule = config.schedule.build()?;
            let mixture = build_mixture(&config.dataset, config.seed)?;
            let data = training_set(&mixture, config.dataset.shape.0, args.samples, config.seed)?;
            let tc = TrainingConfig {
                hidden: vec![args.hidden],
                epochs: args.epochs,
                learning_rate: args.learning_rate,
                seed: config.seed,
                ..TrainingConfig::default()
            };
            let outcome = MlpDenoiser::train(&data, &schedule, &tc)?;
            let mut w = create(args.model.clone())?;
            outcome.model.write_to(&mut w)?;
            w.flush().map_err(|e| HarnessError::Io {
                path: args.model.clone(),
                source: e,
            })?;
            let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "final training loss {last:.5}; model written to {}",
                args.model.display()
            );
        }
        Command::Invert(one) => {
            let lab = Lab::new(&config)?;
            let inst = pick(&lab, one.instance)?;
            let outcome =
                lab.run_method(inst, one.method, &config.inversion, &config.config_hash())?;
            let stdout = io::stdout();
            outcome.report.write_jsonl(stdout.lock(), config.timing)?;
        }
        Command::Reconstruct(one) => {
            let lab = Lab::new(&config)?;
            let inst = pick(&lab, one.instance)?;
            let outcome =
                lab.run_method(inst, one.method, &config.inversion, &config.config_hash())?;
            println!("{}", serde_json::to_string_pretty(&outcome.row)?);
        }
        Command::Edit => {
            let lab = Lab::new(&config)?;
            let summary = run_edit(&lab)?;
            println!(
                "{} edits, {} failed, landed on target: {:.1}%",
                summary.rows.len(),
                summary.failures.len(),
                100.0 * summary.success_rate()
            );
            if !summary.failures.is_empty() {
                for (id, e) in &summary.failures {
                    eprintln!("instance {id}: {e}");
                }
                return Err(HarnessError::RunsFailed {
                    count: summary.failures.len(),
                    path: config.output_dir.join("edits.csv"),
                });
            }
        }
        Command::Run => {
            let outcome = run_experiment(&config)?;
            print_summary(&outcome.summary);
            failures(
                outcome.batch.failures.len(),
                config.output_dir.join("errors.txt"),
            )?;
        }
        Command::Sweep(args) => {
            if args.param.is_some() || !args.values.is_empty() {
                let current = config.sweep.take();
                let param = args
                    .param
                    .or_else(|| current.as_ref().map(|s| s.param.clone()))
                    .ok_or_else(|| HarnessError::Config("sweep needs --param".into()))?;
                let values = if args.values.is_empty() {
                    current.map(|s| s.values).unwrap_or_default()
                } else {
                    args.values
                };
                config.sweep = Some(SweepConfig { param, values });
                config.validate()?;
            }
            let out = run_sweep(&config)?;
            let errors = config
                .output_dir
                .join(format!("sweep_{}_errors.txt", out.param));
            for row in &out.rows {
                println!(
                    "{}={:<10} {:<7} d_noi {:>10} d_rec {:>10} iterations {:>6}",
                    row.param,
                    row.value,
                    row.method,
                    fmt_opt(row.d_noi_median),
                    fmt_opt(row.d_rec_median),
                    fmt_opt(row.iterations_median)
                );
            }
            failures(out.failures.len(), errors)?;
        }
        Command::Plot => {
            let written = emit_plots(&config.output_dir)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Report => {
            let rows = read_rows(&config.output_dir.join("results.csv"))?;
            let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
            methods.sort_unstable();
            methods.dedup();
            println!(
                "{:<8} {:>5} {:>12} {:>12} {:>10}",
                "method", "runs", "d_noi", "d_rec", "psnr"
            );
            for m in methods {
                let of = |f: fn(&dualinv_harness::ResultRow) -> f64| {
                    let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(f).collect();
                    Quantiles::of(&v).map(|q| q.median)
                };
                let runs = rows.iter().filter(|r| r.method == m).count();
                println!(
                    "{m:<8} {runs:>5} {:>12} {:>12} {:>10}",
                    fmt_opt(of(|r| r.d_noi)),
                    fmt_opt(of(|r| r.d_rec)),
                    fmt_opt(of(|r| r.psnr))
                );
            }
        }
    }
    Ok(())
}

/// Run-time failures were recorded: exit status 2.
fn failures(count: usize, path: PathBuf) -> Result<()> {
    if count == 0 {
        Ok(())
    } else {
        Err(HarnessError::RunsFailed { count, path })
    }
}

fn pick(lab: &Lab, id: usize) -> Result<&dualinv_harness::dataset::Instance> {
    lab.instances.get(id).ok_or_else(|| {
        HarnessError::Config(format!(
            "instance {id} out of range (dataset has {})",
            lab.instances.len()
        ))
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4e}"))
}

fn print_summary(summary: &dualinv_harness::Summary) {
    println!(
        "config {} seed {} instances {}",
        summary.config_hash, summary.seed, summary.instances
    );
    println!(
        "{:<8} {:>5} {:>5} {:>12} {:>12} {:>10}",
        "method", "runs", "fail", "d_noi", "d_rec", "psnr"
    );
    for m in &summary.methods {
        println!(
            "{:<8} {:>5} {:>5} {:>12} {:>12} {:>10}",
            m.method,
            m.runs,
            m.failures,
            fmt_opt(m.d_noi.map(|q| q.median)),
            fmt_opt(m.d_rec.map(|q| q.median)),
            fmt_opt(m.psnr.map(|q| q.median))
        );
    }
}
