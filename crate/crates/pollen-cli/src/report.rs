//! Report emission: per-round metrics CSV, per-cell summary CSV, a pooled
//! plain-text table, fitted-curve dumps, and a JSON run manifest.
//!
//! Number formatting is part of the file contract: durations print at full
//! double precision (shortest round-tripping decimal), derived rates at six
//! significant digits with at least one decimal place. Identical results
//! therefore serialize to identical bytes, which the determinism tests hash.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use pollen_sim::engine::{ExperimentResult, MeanStd, RoundMetrics};

/// Header of every per-round metrics file.
pub const METRICS_HEADER: &str =
    "round,policy,clients,duration_s,throughput_cps,timedelta_s,messages";

/// Formats a duration (seconds) at full double precision: Rust's shortest
/// round-tripping decimal representation.
pub fn fmt_duration(seconds: f64) -> String {
    format!("{seconds}")
}

/// Formats a derived rate to 6 significant digits, trimming trailing zeros
/// but always keeping one decimal (100 clients / 20 s → "5.0").
pub fn fmt_rate(rate: f64) -> String {
    if rate == 0.0 {
        return "0.0".to_string();
    }
    if !rate.is_finite() {
        return format!("{rate}");
    }
    let magnitude = rate.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let mut s = format!("{rate:.decimals$}");
    if !s.contains('.') {
        // Rates ≥ 1e6 round at integer scale; normalize to ≥ 1 decimal.
        let scale = 10f64.powi(magnitude - 5);
        s = format!("{:.1}", (rate / scale).round() * scale);
    } else {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.push('0');
        }
    }
    s
}

/// Renders the per-round metrics file (one data row per round).
pub fn metrics_csv(policy: &str, rounds: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round_index,
            policy,
            r.clients_trained,
            fmt_duration(r.round_duration),
            fmt_rate(r.throughput),
            fmt_duration(r.timedelta_workers),
            r.messages_sent,
        );
    }
    out
}

/// Renders the fitted-curve log of a learning-based run (one row per round
/// and GPU type).
pub fn fits_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("round,gpu_type,a,b,c,d,mse,num_points\n");
    for snapshot in &result.fits_per_round {
        for fit in &snapshot.fits {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                snapshot.round_index,
                fit.gpu_type,
                fmt_duration(fit.a),
                fmt_duration(fit.b),
                fmt_duration(fit.c),
                fmt_duration(fit.d),
                fmt_duration(fit.mse),
                fit.num_points,
            );
        }
    }
    out
}

/// One sweep cell's identity and outcome, as reported in summaries and the
/// manifest. A single `run` is a one-cell sweep with axis "run".
#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    /// Axis name, e.g. "policy"; "run" for single experiments.
    pub axis: String,
    /// The axis value this cell ran, e.g. "rr" or "400".
    pub value: String,
    pub seed: u64,
    /// Directory of the cell's per-round files, relative to the report root.
    pub dir: String,
    pub config_fingerprint: Option<String>,
    /// `None` while the cell succeeded; the error message otherwise.
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<ExperimentResult>,
}

impl CellReport {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Renders `summary.csv`: one row per cell with mean ± std of the round
/// metrics (rates at 6 significant digits, durations full precision).
pub fn summary_csv(cells: &[CellReport]) -> String {
    let mut out = String::from(
        "axis,value,seed,rounds,clients,throughput_mean_cps,throughput_std_cps,\
         timedelta_mean_s,timedelta_std_s,duration_mean_s,duration_std_s,status\n",
    );
    for cell in cells {
        match &cell.result {
            Some(result) => {
                let durations: Vec<f64> = result.rounds.iter().map(|r| r.round_duration).collect();
                let duration_stats = MeanStd::from_values(&durations);
                let clients: u64 = result.rounds.iter().map(|r| r.clients_trained).sum();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},ok",
                    cell.axis,
                    cell.value,
                    cell.seed,
                    result.rounds.len(),
                    clients,
                    fmt_rate(result.throughput_stats.mean),
                    fmt_rate(result.throughput_stats.std),
                    fmt_duration(result.timedelta_stats.mean),
                    fmt_duration(result.timedelta_stats.std),
                    fmt_duration(duration_stats.mean),
                    fmt_duration(duration_stats.std),
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{},{},{},,,,,,,,,error",
                    cell.axis, cell.value, cell.seed,
                );
            }
        }
    }
    out
}

/// Renders `table.txt`: one row per axis value, pooling every round of every
/// seed behind that value — the shape of a results table in a writeup.
pub fn table_txt(axis: &str, cells: &[CellReport]) -> String {
    // Preserve first-seen value order (= the sweep's declared order).
    let mut order: Vec<&str> = Vec::new();
    for cell in cells {
        if !order.contains(&cell.value.as_str()) {
            order.push(&cell.value);
        }
    }

    let mut out = format!("axis: {axis}\n");
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>8} {:>22} {:>22}",
        "value", "seeds", "rounds", "throughput (cps)", "timedelta (s)"
    );
    for value in order {
        let mut seeds = 0usize;
        let mut throughput = Vec::new();
        let mut timedelta = Vec::new();
        let mut failed = 0usize;
        for cell in cells.iter().filter(|c| c.value == value) {
            match &cell.result {
                Some(result) => {
                    seeds += 1;
                    throughput.extend(result.rounds.iter().map(|r| r.throughput));
                    timedelta.extend(result.rounds.iter().map(|r| r.timedelta_workers));
                }
                None => failed += 1,
            }
        }
        if throughput.is_empty() {
            let _ = writeln!(
                out,
                "{value:<16} {seeds:>6} {:>8} {failed} cell(s) failed",
                0
            );
            continue;
        }
        let tp = MeanStd::from_values(&throughput);
        let td = MeanStd::from_values(&timedelta);
        let mut row = format!(
            "{:<16} {:>6} {:>8} {:>22} {:>22}",
            value,
            seeds,
            throughput.len(),
            tp.to_string(),
            td.to_string(),
        );
        if failed > 0 {
            let _ = write!(row, "  ({failed} cell(s) failed)");
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// The JSON manifest tying outputs back to their exact inputs.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    axis: &'a str,
    cells: Vec<ManifestCell<'a>>,
}

#[derive(Debug, Serialize)]
struct ManifestCell<'a> {
    value: &'a str,
    seed: u64,
    dir: &'a str,
    config_fingerprint: Option<&'a str>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

pub fn manifest_json(command: &str, axis: &str, cells: &[CellReport]) -> String {
    let manifest = Manifest {
        tool: "pollen-sim",
        version: env!("CARGO_PKG_VERSION"),
        command,
        axis,
        cells: cells
            .iter()
            .map(|c| ManifestCell {
                value: &c.value,
                seed: c.seed,
                dir: &c.dir,
                config_fingerprint: c.config_fingerprint.as_deref(),
                status: if c.ok() { "ok" } else { "error" },
                error: c.error.as_deref(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

/// Writes one cell's per-round files into `dir`: `metrics.csv` always,
/// `fits.csv` when the run recorded fitted curves.
pub fn write_cell_files(dir: &Path, policy: &str, result: &ExperimentResult) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(policy, &result.rounds))?;
    if !result.fits_per_round.is_empty() {
        fs::write(dir.join("fits.csv"), fits_csv(result))?;
    }
    Ok(())
}

/// Writes the report files shared by `run` and `sweep` into the root
/// directory: `summary.csv`, `table.txt`, and `manifest.json`.
pub fn write_report_files(
    dir: &Path,
    command: &str,
    axis: &str,
    cells: &[CellReport],
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(cells))?;
    fs::write(dir.join("table.txt"), table_txt(axis, cells))?;
    fs::write(
        dir.join("manifest.json"),
        manifest_json(command, axis, cells),
    )?;
    Ok(())
}
