use std::path::Path;
use std::process::Command;

use dualinv::schedule::ddim_invert_step_naive;
use dualinv::Shape;
use dualinv_harness::config::{LatentShape, Method};
use dualinv_harness::dataset::{build_mixture, synth_dataset};
use dualinv_harness::experiment::{read_rows, CSV_COLUMNS};
use dualinv_harness::{
    emit_plots, run_experiment, run_sweep, sweep_with_lab, ExperimentConfig, HarnessError, Lab,
};

fn small(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.dataset.instances = 6;
    c.dataset.shape = LatentShape(Shape::Flat(6));
    c.dataset.subcomponents = 2;
    c.schedule.steps = 20;
    c
}

#[test]
fn synthesis_is_deterministic_and_replays_its_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path());
    let schedule = config.schedule.build().unwrap();
    let mixture = build_mixture(&config.dataset, config.seed).unwrap();
    let a = synth_dataset(&config.dataset, &schedule, &mixture, config.seed, 1.0).unwrap();
    let b = synth_dataset(&config.dataset, &schedule, &mixture, config.seed, 1.0).unwrap();
    assert_eq!(a, b);

    let other = synth_dataset(&config.dataset, &schedule, &mixture, config.seed + 1, 1.0).unwrap();
    assert_ne!(a[0].z_t_star, other[0].z_t_star);

    for inst in &a {
        let mut z = inst.z_0.clone();
        for t in 1..=schedule.steps() {
            z = ddim_invert_step_naive(&z, &inst.eps_trace[t - 1], &schedule, t).unwrap();
        }
        for (x, y) in z.as_slice().iter().zip(inst.z_t_star.as_slice()) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn zero_instances_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.dataset.instances = 0;
    let Err(err) = Lab::new(&config) else {
        panic!("zero instances accepted");
    };
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn one_ddim_run_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.dataset.instances = 1;
    config.methods = vec![Method::Ddim];
    let out = run_experiment(&config).unwrap();
    assert_eq!(out.batch.outcomes.len(), 1);
    let rows = read_rows(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "ddim");
    assert_eq!(rows[0].config_hash, config.config_hash());
    assert_eq!(rows[0].iterations_total, config.schedule.steps);

    let header = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert!(dir.path().join("reports/ddim/0000.jsonl").exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("errors.txt")).unwrap(),
        ""
    );
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&small(a.path())).unwrap();
    let mut config = small(b.path());
    config.workers = 3;
    run_experiment(&config).unwrap();
    for file in ["results.csv", "summary.json", "reports/dci/0003.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn single_value_sweep_matches_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path());
    let experiment = run_experiment(&config).unwrap();
    let lab = Lab::new(&config).unwrap();
    let sweep = sweep_with_lab(&lab, "eta", &[config.inversion.eta]).unwrap();
    assert_eq!(sweep.summaries.len(), 1);
    assert_eq!(sweep.summaries[0].1, experiment.summary);
}

#[test]
fn lambda_zero_row_reproduces_spd() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.sweep = Some(dualinv_harness::config::SweepConfig {
        param: "lambda".into(),
        values: vec![2.0, 0.0],
    });
    let out = run_sweep(&config).unwrap();
    assert_eq!(out.rows.len(), 2 * config.methods.len());
    assert_eq!(out.rows[0].value, 0.0);
    let at_zero: Vec<_> = out.rows.iter().filter(|r| r.value == 0.0).collect();
    let spd = at_zero.iter().find(|r| r.method == "spd").unwrap();
    let dci = at_zero.iter().find(|r| r.method == "dci").unwrap();
    assert_eq!(spd.d_noi_median, dci.d_noi_median);
    assert_eq!(spd.d_rec_median, dci.d_rec_median);
    assert!(dir.path().join("sweep_lambda.csv").exists());
}

#[test]
fn plots_are_deterministic_and_titled_with_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.dataset.instances = 1;
    config.methods = vec![Method::Dci];
    run_experiment(&config).unwrap();
    let written = emit_plots(dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    let trace = std::fs::read_to_string(dir.path().join("plots/lfix_dci.svg")).unwrap();
    assert!(trace.starts_with("<svg"));
    assert!(trace.contains(&config.config_hash()));
    let first: Vec<Vec<u8>> = written.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let again = emit_plots(dir.path()).unwrap();
    let second: Vec<Vec<u8>> = again.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn empty_method_list_writes_no_plots() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path());
    config.methods = Vec::new();
    run_experiment(&config).unwrap();
    assert!(emit_plots(dir.path()).unwrap().is_empty());
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn plotting_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_plots(dir.path()).unwrap_err();
    assert!(matches!(err, HarnessError::MissingResults(_)));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dualinv"))
        .args(args)
        .env_remove("DUALINV_SEED")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let base = [
        "--out",
        out,
        "--set",
        "dataset.instances=2",
        "--set",
        "dataset.shape=\"4\"",
        "--set",
        "schedule.T=10",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        base.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| cli(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let ok = run(with(&["run"]));
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert_eq!(run(with(&["plot"])).status.code(), Some(0));
    assert_eq!(run(with(&["report"])).status.code(), Some(0));
    assert_eq!(run(with(&["synth"])).status.code(), Some(0));
    assert!(dir.path().join("instances.jsonl").exists());

    let bad = run(with(&["--set", "inversion.eta=-1", "run"]));
    assert_eq!(bad.status.code(), Some(1));
    let model = dir.path().join("broken.txt");
    std::fs::write(&model, "not a model\n").unwrap();
    let choice = format!("denoiser=\"mlp:{}\"", model.display());
    let bad = run(with(&[
        "--set",
        &choice,
        "--set",
        "dataset.ideal_conditioning=\"label\"",
        "run",
    ]));
    assert_eq!(
        bad.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&bad.stderr)
    );
    let missing = tempfile::tempdir().unwrap();
    assert_eq!(
        cli(&["--out", missing.path().to_str().unwrap(), "plot"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn trained_network_runs_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.txt");
    let out = dir.path().to_str().unwrap();
    let common = [
        "--out",
        out,
        "--set",
        "dataset.shape=\"4\"",
        "--set",
        "dataset.instances=3",
        "--set",
        "dataset.ideal_conditioning=\"label\"",
        "--set",
        "schedule.T=10",
    ];
    let mut train: Vec<&str> = common.to_vec();
    train.extend([
        "train",
        "--model",
        model.to_str().unwrap(),
        "--samples",
        "256",
        "--epochs",
        "3",
    ]);
    let o = cli(&train);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let choice = format!("denoiser=\"mlp:{}\"", model.display());
    let mut run: Vec<&str> = common.to_vec();
    run.extend(["--set", &choice, "run"]);
    let o = cli(&run);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        read_rows(&dir.path().join("results.csv")).unwrap().len(),
        12
    );
}
