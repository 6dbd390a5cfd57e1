//! Aggregation of run directories into a method x model size x dataset
//! comparison table and alignment/uniformity scatter data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use disco_core::eval::EvalReport;
use disco_core::pipeline::EvalRecord;

use crate::artifacts::{RunSummary, LOG_FILE, REPORT_JSONL, SUMMARY_FILE};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const SCATTER_CSV: &str = "align_uniform.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Row {
    run: String,
    command: String,
    method: String,
    model_size: usize,
    dataset: String,
    rho: Option<f64>,
    pairs: usize,
    best_dev: Option<f64>,
    align: Option<f64>,
    uniform: Option<f64>,
}

struct Run {
    name: String,
    summary: RunSummary,
    reports: Vec<EvalReport>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_run(dir: &Path) -> Result<Run> {
    let summary: RunSummary = serde_json::from_str(&read(&dir.join(SUMMARY_FILE))?)
        .with_context(|| format!("parsing {}", dir.join(SUMMARY_FILE).display()))?;
    let log = dir.join(LOG_FILE);
    if log.exists() {
        for (i, line) in read(&log)?.lines().enumerate() {
            serde_json::from_str::<EvalRecord>(line)
                .with_context(|| format!("{}:{}: malformed log record", log.display(), i + 1))?;
        }
    }
    let mut reports = Vec::new();
    let path = dir.join(REPORT_JSONL);
    for (i, line) in read(&path)?.lines().enumerate() {
        let r: EvalReport = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed report record", path.display(), i + 1))?;
        reports.push(r);
    }
    Ok(Run {
        name: run_name(dir),
        summary,
        reports,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Returns `Ok(true)` when at least one run was aggregated.
pub fn run(dirs: &[PathBuf], out: &Path) -> Result<bool> {
    let mut runs = Vec::new();
    for dir in dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("warning: skipping run {}: {e:#}", dir.display()),
        }
    }
    if runs.is_empty() {
        bail!("no usable runs among {} director{}", dirs.len(), if dirs.len() == 1 { "y" } else { "ies" });
    }

    let rows: Vec<Row> = runs
        .iter()
        .flat_map(|run| {
            run.reports.iter().map(move |r| Row {
                run: run.name.clone(),
                command: run.summary.command.clone(),
                method: run.summary.method.clone(),
                model_size: run.summary.model_size,
                dataset: r.name.clone(),
                rho: r.rho,
                pairs: r.count,
                best_dev: run.summary.best_dev,
                align: r.align,
                uniform: r.uniform,
            })
        })
        .collect();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from("run,command,method,model_size,dataset,rho,pairs,best_dev\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.run),
            csv_field(&r.command),
            csv_field(&r.method),
            r.model_size,
            csv_field(&r.dataset),
            opt(r.rho),
            r.pairs,
            opt(r.best_dev)
        );
    }
    fs::write(out.join(COMPARISON_CSV), csv)?;
    fs::write(out.join(COMPARISON_JSON), serde_json::to_string_pretty(&rows)? + "\n")?;

    let mut scatter = String::from("run,method,dataset,align,uniform\n");
    let mut points = 0;
    for r in rows.iter().filter(|r| r.align.is_some() && r.uniform.is_some()) {
        let _ = writeln!(
            scatter,
            "{},{},{},{},{}",
            csv_field(&r.run),
            csv_field(&r.method),
            csv_field(&r.dataset),
            opt(r.align),
            opt(r.uniform)
        );
        points += 1;
    }
    fs::write(out.join(SCATTER_CSV), scatter)?;
    println!(
        "aggregated {} run(s) into {} row(s) and {} scatter point(s) in {}",
        runs.len(),
        rows.len(),
        points,
        out.display()
    );
    Ok(true)
}
