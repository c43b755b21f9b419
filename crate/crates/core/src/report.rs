//! Report files: canonical JSON run reports, plot-ready CSV curves, and
//! collision diagnostics tables.
//!
//! Everything written here is byte-deterministic for a fixed (config, seed):
//! map-like data is kept in ordered containers and floats print in Rust's
//! shortest round-trip form. Wall-clock timings go to a separate sidecar file
//! that is excluded from the determinism contract.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{
    AggregateReport, ComparisonTable, ExperimentOutcome, Method, RunReport,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report: outcome holds no runs")]
    EmptyOutcome,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const CURVES_HEADER: &str = "method,seed,step,miou_old,miou_new,miou_all";
pub const COLLISION_PAIRS_HEADER: &str = "seed,step,old_class,new_class,count";
pub const COLLISION_FREQ_HEADER: &str = "seed,step,class,raw,normalized";
pub const COMPARE_HEADER: &str =
    "method,final_old_mean,final_old_std,final_new_mean,final_new_std,final_all_mean,final_all_std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Canonical JSON reports (per seed plus aggregate).
    Json,
    /// Plot-ready CSV curves and collision tables.
    Csv,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>, ReportError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| ReportError::CsvParse {
            line,
            reason: format!("bad float '{s}': {e}"),
        })
}

pub fn write_run_report(dir: &Path, report: &RunReport) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("run_seed{}.json", report.seed));
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn write_aggregate(dir: &Path, aggregate: &AggregateReport) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("aggregate.json");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    serde_json::to_writer_pretty(&mut w, aggregate)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    Ok(path)
}

/// One row of the per-step mIoU curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub method: Method,
    pub seed: u64,
    pub step: usize,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

pub fn write_curves_csv(dir: &Path, runs: &[RunReport]) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("curves.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    writeln!(w, "{CURVES_HEADER}").map_err(io_err(&path))?;
    for run in runs {
        for step in &run.steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                run.method,
                run.seed,
                step.step,
                fmt_opt(step.miou_old),
                fmt_opt(step.miou_new),
                fmt_opt(step.miou_all),
            )
            .map_err(io_err(&path))?;
        }
    }
    Ok(path)
}

/// Reads a curves CSV back; values round-trip exactly.
pub fn parse_curves_csv(path: &Path) -> Result<Vec<CurveRow>, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CURVES_HEADER => {}
        other => {
            return Err(ReportError::CsvParse {
                line: 1,
                reason: format!(
                    "expected header '{CURVES_HEADER}', got '{}'",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(ReportError::CsvParse {
                line: i + 1,
                reason: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let method = parts[0].parse::<Method>().map_err(|e| ReportError::CsvParse {
            line: i + 1,
            reason: e,
        })?;
        let parse_int = |s: &str| -> Result<u64, ReportError> {
            s.parse().map_err(|e| ReportError::CsvParse {
                line: i + 1,
                reason: format!("bad integer '{s}': {e}"),
            })
        };
        rows.push(CurveRow {
            method,
            seed: parse_int(parts[1])?,
            step: parse_int(parts[2])? as usize,
            miou_old: parse_opt(parts[3], i + 1)?,
            miou_new: parse_opt(parts[4], i + 1)?,
            miou_all: parse_opt(parts[5], i + 1)?,
        });
    }
    Ok(rows)
}

pub fn write_collision_tables(dir: &Path, runs: &[RunReport]) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let pairs_path = dir.join("collision_pairs.csv");
    let freq_path = dir.join("collision_frequency.csv");
    let mut pw = BufWriter::new(File::create(&pairs_path).map_err(io_err(&pairs_path))?);
    let mut fw = BufWriter::new(File::create(&freq_path).map_err(io_err(&freq_path))?);
    writeln!(pw, "{COLLISION_PAIRS_HEADER}").map_err(io_err(&pairs_path))?;
    writeln!(fw, "{COLLISION_FREQ_HEADER}").map_err(io_err(&freq_path))?;
    for run in runs {
        for step in &run.steps {
            if let Some(diag) = &step.collisions {
                for p in &diag.pairs {
                    writeln!(
                        pw,
                        "{},{},{},{},{}",
                        run.seed, step.step, p.old_class, p.new_class, p.count
                    )
                    .map_err(io_err(&pairs_path))?;
                }
                for f in &diag.frequency {
                    writeln!(
                        fw,
                        "{},{},{},{},{}",
                        run.seed, step.step, f.class, f.raw, f.normalized
                    )
                    .map_err(io_err(&freq_path))?;
                }
            }
        }
    }
    Ok(vec![pairs_path, freq_path])
}

/// Wall-clock sidecar; deliberately not part of the canonical report files.
pub fn write_timing(dir: &Path, runs: &[RunReport]) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("timing.txt");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for run in runs {
        writeln!(w, "seed {}: {:.3}s", run.seed, run.wall_clock_secs).map_err(io_err(&path))?;
    }
    Ok(path)
}

/// Writes an experiment outcome in the requested format and returns the
/// created files. Refuses an outcome with no runs.
pub fn emit_report(
    outcome: &ExperimentOutcome,
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if outcome.runs.is_empty() {
        return Err(ReportError::EmptyOutcome);
    }
    let mut files = Vec::new();
    match format {
        ReportFormat::Json => {
            for run in &outcome.runs {
                files.push(write_run_report(dir, run)?);
            }
            files.push(write_aggregate(dir, &outcome.aggregate)?);
        }
        ReportFormat::Csv => {
            files.push(write_curves_csv(dir, &outcome.runs)?);
            files.extend(write_collision_tables(dir, &outcome.runs)?);
        }
    }
    Ok(files)
}

fn fmt_mean_std(v: Option<crate::experiment::MeanStd>) -> (String, String) {
    match v {
        Some(ms) => (ms.mean.to_string(), ms.std.to_string()),
        None => (String::new(), String::new()),
    }
}

pub fn write_compare_csv(dir: &Path, table: &ComparisonTable) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("compare.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    writeln!(w, "{COMPARE_HEADER}").map_err(io_err(&path))?;
    for row in &table.rows {
        let (om, os) = fmt_mean_std(row.final_old);
        let (nm, ns) = fmt_mean_std(row.final_new);
        let (am, a_s) = fmt_mean_std(row.final_all);
        writeln!(w, "{},{},{},{},{},{},{}", row.method, om, os, nm, ns, am, a_s)
            .map_err(io_err(&path))?;
    }
    Ok(path)
}

pub fn write_compare_json(dir: &Path, table: &ComparisonTable) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("compare.json");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    serde_json::to_writer_pretty(&mut w, table)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Human-readable comparison table for terminal output.
pub fn format_compare_table(table: &ComparisonTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "old", "±", "new", "±", "all", "±"
    ));
    for row in &table.rows {
        let cell = |v: Option<crate::experiment::MeanStd>| match v {
            Some(ms) => (format!("{:.4}", ms.mean), format!("{:.4}", ms.std)),
            None => ("-".into(), "-".into()),
        };
        let (om, os) = cell(row.final_old);
        let (nm, ns) = cell(row.final_new);
        let (am, a_s) = cell(row.final_all);
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            row.method.to_string(),
            om,
            os,
            nm,
            ns,
            am,
            a_s
        ));
    }
    out
}
