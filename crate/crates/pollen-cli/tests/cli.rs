//! Integration tests for the CLI layer: file emission, determinism of the
//! emitted bytes, summary recomputation through an independent CSV reader,
//! sweep/run equivalence, and the binary's exit codes.

use std::path::Path;
use std::process::Command;

use pollen_cli::config::{parse_config_str, CliOverrides};
use pollen_cli::run_single;
use pollen_cli::sweep::{parse_sweep_str, run_sweep};

const BIN: &str = env!("CARGO_BIN_EXE_pollen-sim");

/// A config small enough that a full run takes milliseconds.
const SMALL: &str = r#"
    seed = 9
    policy = "bu"
    clients_per_round = 10
    num_rounds = 5
    model_dim = 3

    [population]
    num_clients = 80
    batch_size = 10
    seed = 9
    [population.size_distribution]
    kind = "uniform"
    lo = 10
    hi = 300

    [cluster.workers_per_gpu]
    "a40-like" = 2
    "rtx2080ti-like" = 2
"#;

fn resolve_small(out: &Path) -> pollen_cli::config::ExperimentConfig {
    let overrides = CliOverrides {
        out_flag: Some(out.to_path_buf()),
        ..Default::default()
    };
    parse_config_str(SMALL)
        .unwrap()
        .resolve(&overrides)
        .unwrap()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn run_emits_the_full_report_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = resolve_small(dir.path());
    run_single(&config).unwrap();

    let metrics = read(&dir.path().join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], pollen_cli::report::METRICS_HEADER);
    assert_eq!(lines.len(), 6, "5 rounds + header");
    assert!(lines[1].starts_with("0,bu,10,"));

    let summary = read(&dir.path().join("summary.csv"));
    assert_eq!(summary.lines().count(), 2, "header + one cell");
    assert!(summary.lines().nth(1).unwrap().ends_with(",ok"));

    assert!(dir.path().join("table.txt").exists());
    let manifest = read(&dir.path().join("manifest.json"));
    assert!(manifest.contains("\"tool\": \"pollen-sim\""));
    assert!(manifest.contains(&config.spec.fingerprint()));

    // The effective config is written back and resolves to the same spec.
    let embedded = read(&dir.path().join("config.toml"));
    let reloaded = parse_config_str(&embedded)
        .unwrap()
        .resolve(&CliOverrides::default())
        .unwrap();
    assert_eq!(reloaded.spec.fingerprint(), config.spec.fingerprint());
}

#[test]
fn lb_runs_emit_fit_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = resolve_small(dir.path());
    config.spec.policy = "lb".parse().unwrap();
    run_single(&config).unwrap();
    let fits = read(&dir.path().join("fits.csv"));
    assert_eq!(
        fits.lines().next().unwrap(),
        "round,gpu_type,a,b,c,d,mse,num_points"
    );
    // Rounds 1..=4 × 2 GPU types.
    assert_eq!(fits.lines().count(), 9);

    // Non-lb runs do not leave a stale fits file behind.
    let dir = tempfile::tempdir().unwrap();
    run_single(&resolve_small(dir.path())).unwrap();
    assert!(!dir.path().join("fits.csv").exists());
}

#[test]
fn reruns_emit_byte_identical_files() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_single(&resolve_small(dir_a.path())).unwrap();
    run_single(&resolve_small(dir_b.path())).unwrap();
    for file in ["metrics.csv", "summary.csv", "table.txt", "manifest.json"] {
        assert_eq!(
            read(&dir_a.path().join(file)),
            read(&dir_b.path().join(file)),
            "{file} differs between identical runs"
        );
    }
}

#[test]
fn summary_matches_independent_recomputation_from_metrics() {
    let dir = tempfile::tempdir().unwrap();
    run_single(&resolve_small(dir.path())).unwrap();

    // Independent reader: the csv crate, not our own writer code.
    let mut reader = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let tp_col = headers.iter().position(|h| h == "throughput_cps").unwrap();
    let td_col = headers.iter().position(|h| h == "timedelta_s").unwrap();
    let mut throughput = Vec::new();
    let mut timedelta = Vec::new();
    for record in reader.records() {
        let record = record.unwrap();
        throughput.push(record[tp_col].parse::<f64>().unwrap());
        timedelta.push(record[td_col].parse::<f64>().unwrap());
    }
    assert_eq!(throughput.len(), 5);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut summary = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let sh = summary.headers().unwrap().clone();
    let row = summary.records().next().unwrap().unwrap();
    let col = |name: &str| {
        row[sh.iter().position(|h| h == name).unwrap()]
            .parse::<f64>()
            .unwrap()
    };
    // Throughput cells pass through 6-significant-digit rounding, so the
    // recomputation agrees to ~1e-5 relative; timedelta is full precision.
    let tp_mean = col("throughput_mean_cps");
    assert!((tp_mean - mean(&throughput)).abs() <= 1e-4 * tp_mean.abs().max(1.0));
    let td_mean = col("timedelta_mean_s");
    assert!((td_mean - mean(&timedelta)).abs() <= 1e-12 * td_mean.abs().max(1.0));
}

#[test]
fn single_cell_sweep_matches_a_plain_run() {
    let run_dir = tempfile::tempdir().unwrap();
    run_single(&resolve_small(run_dir.path())).unwrap();

    let sweep_dir = tempfile::tempdir().unwrap();
    // The same experiment as SMALL, with policy and seed supplied by the
    // sweep axis and seed list instead of the base config.
    let sweep_text = r#"
        axis = "policy"
        values = ["bu"]
        seeds = [9]

        [base]
        clients_per_round = 10
        num_rounds = 5
        model_dim = 3

        [base.population]
        num_clients = 80
        batch_size = 10
        seed = 9
        [base.population.size_distribution]
        kind = "uniform"
        lo = 10
        hi = 300

        [base.cluster.workers_per_gpu]
        "a40-like" = 2
        "rtx2080ti-like" = 2
    "#;
    let sweep = parse_sweep_str(sweep_text).unwrap();
    let report = run_sweep(&sweep, sweep_dir.path(), &CliOverrides::default()).unwrap();
    assert!(report.all_ok());

    let cell_metrics = read(&sweep_dir.path().join("policy-bu-seed-9/metrics.csv"));
    let run_metrics = read(&run_dir.path().join("metrics.csv"));
    assert_eq!(cell_metrics, run_metrics);
}

#[test]
fn sweep_continues_past_failing_cells_and_reports_them() {
    let dir = tempfile::tempdir().unwrap();
    // Second value asks for more clients per round than the population has:
    // that cell fails, the first still runs.
    let text = r#"
        axis = "clients_per_round"
        values = [10, 5000]
        seeds = [1]
        [base]
        num_rounds = 2
        [base.population]
        num_clients = 100
        batch_size = 10
        [base.population.size_distribution]
        kind = "constant"
        value = 50
    "#;
    let sweep = parse_sweep_str(text).unwrap();
    let report = run_sweep(&sweep, dir.path(), &CliOverrides::default()).unwrap();
    assert!(!report.all_ok());
    assert_eq!(report.cells.len(), 2);
    assert!(report.cells[0].ok());
    assert!(!report.cells[1].ok());

    assert!(dir
        .path()
        .join("clients_per_round-10-seed-1/metrics.csv")
        .exists());
    assert!(!dir
        .path()
        .join("clients_per_round-5000-seed-1/metrics.csv")
        .exists());
    let summary = read(&dir.path().join("summary.csv"));
    assert!(summary.contains(",error"));
    let manifest = read(&dir.path().join("manifest.json"));
    assert!(manifest.contains("\"status\": \"error\""));
}

#[test]
fn binary_run_succeeds_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(&config_path, SMALL).unwrap();
    let out = dir.path().join("out");

    let output = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("5 round(s)"), "stdout: {stdout}");
    assert!(out.join("metrics.csv").exists());

    // Same config into a second directory: byte-identical metrics.
    let out2 = dir.path().join("out2");
    let status = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        read(&out.join("metrics.csv")),
        read(&out2.join("metrics.csv"))
    );
}

#[test]
fn binary_env_var_sets_the_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(&config_path, SMALL).unwrap();
    let out = dir.path().join("from-env");

    let status = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&config_path)
        .env("POLLEN_SIM_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn binary_seed_override_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    // Leave population.seed unset so the master seed drives everything.
    std::fs::write(&config_path, SMALL.replace("    seed = 9\n", "")).unwrap();

    let run = |out: &Path, seed: &str| {
        let status = Command::new(BIN)
            .args(["run", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a, "1");
    run(&out_b, "2");
    assert_ne!(
        read(&out_a.join("metrics.csv")),
        read(&out_b.join("metrics.csv"))
    );
}

#[test]
fn binary_exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // validate: good config → 0, bad config → nonzero naming the field.
    let good = dir.path().join("good.toml");
    std::fs::write(&good, SMALL).unwrap();
    let output = Command::new(BIN)
        .args(["validate", "--config"])
        .arg(&good)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("ok: fingerprint"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "policy = \"foo\"").unwrap();
    let output = Command::new(BIN)
        .args(["validate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("policy"));

    // sweep with a failing cell → nonzero, but reports still written.
    let sweep_path = dir.path().join("sweep.toml");
    std::fs::write(
        &sweep_path,
        r#"
        axis = "clients_per_round"
        values = [5, 5000]
        seeds = [1]
        [base]
        num_rounds = 1
        [base.population]
        num_clients = 50
        batch_size = 10
        [base.population.size_distribution]
        kind = "constant"
        value = 30
        "#,
    )
    .unwrap();
    let out = dir.path().join("sweep-out");
    let output = Command::new(BIN)
        .args(["sweep", "--config"])
        .arg(&sweep_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(out.join("summary.csv").exists());
    assert!(String::from_utf8_lossy(&output.stdout).contains("1/2 cell(s) succeeded"));

    // presets → 0 and lists every built-in name.
    let output = Command::new(BIN).arg("presets").output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for name in [
        "openimage-like",
        "speech-like",
        "shakespeare-like",
        "a40-like",
        "rtx2080ti-like",
    ] {
        assert!(stdout.contains(name), "presets output missing {name}");
    }

    // missing config file → nonzero with the path in the message.
    let output = Command::new(BIN)
        .args(["run", "--config", "/nonexistent/x.toml"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("nonexistent"));
}
