//! CSV and JSON outputs of a run or sweep.

use std::path::Path;

use serde::Serialize;

use super::config::SystemConfig;
use super::{GridSummary, SeRow, SweepOutput, TraceRow};
use crate::error::Result;

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const RESULT_COLUMNS: [&str; 14] = [
    "drop_seed",
    "m",
    "k_total",
    "l",
    "n",
    "combiner",
    "precoder_mode",
    "se_path",
    "iteration",
    "ue_id",
    "se_bits_per_hz",
    "sum_se",
    "wsr",
    "n_r",
];

pub fn write_results(path: &Path, rows: &[SeRow]) -> Result<()> {
    write_csv(path, rows, &RESULT_COLUMNS)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let header = ["drop_seed", "l", "n", "iteration", "ue_id", "se_bits_per_hz", "lambda", "power", "wsr", "accepted"];
    write_csv(path, rows, &header)
}

pub fn write_summary(path: &Path, rows: &[GridSummary]) -> Result<()> {
    write_csv(path, rows, &["axis_value", "drops", "mean_sum_se", "std_sum_se", "mean_ue_se"])
}

/// Wall-clock seconds per drop. Kept apart from `results.csv` so that file
/// stays byte-identical between runs.
pub fn write_timing(path: &Path, timing: &[(usize, u64, f64)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        axis_value: usize,
        drop_seed: u64,
        seconds: f64,
    }
    let rows: Vec<Row> = timing.iter().map(|&(axis_value, drop_seed, seconds)| Row { axis_value, drop_seed, seconds }).collect();
    write_csv(path, &rows, &["axis_value", "drop_seed", "seconds"])
}

#[derive(Serialize)]
struct Meta<'a> {
    code_version: &'static str,
    config: &'a SystemConfig,
    seeds: &'a [u64],
    axis: Option<&'a str>,
    values: &'a [usize],
}

pub fn write_meta(path: &Path, config: &SystemConfig, seeds: &[u64], axis: Option<&str>, values: &[usize]) -> Result<()> {
    let meta = Meta { code_version: env!("CARGO_PKG_VERSION"), config, seeds, axis, values };
    std::fs::write(path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Writes every output of a sweep into `dir`, creating it if needed.
pub fn write_all(dir: &Path, config: &SystemConfig, seeds: &[u64], axis: Option<&str>, out: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results(&dir.join("results.csv"), &out.rows)?;
    write_trace(&dir.join("trace.csv"), &out.trace)?;
    write_summary(&dir.join("summary.csv"), &out.summary)?;
    write_timing(&dir.join("timing.csv"), &out.timing)?;
    write_meta(&dir.join("meta.json"), config, seeds, axis, &out.values)
}
