//! Files written into a run's `--out` directory. Nothing here depends on
//! wall-clock time or absolute paths, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use disco_core::checkpoint::Checkpoint;
use disco_core::data::StsPairSet;
use disco_core::eval::{render_table, sts_evaluate, EvalReport};
use disco_core::pipeline::{StageOutcome, BEST_CHECKPOINT};
use disco_core::TrainConfig;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "run.json";
pub const REPORT_JSONL: &str = "eval_report.jsonl";
pub const REPORT_TSV: &str = "eval_report.tsv";
pub const REPORT_TXT: &str = "eval_report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub method: String,
    /// Student parameter count, projection excluded.
    pub model_size: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_dev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub diagnostics: bool,
}

impl RunSummary {
    pub fn new(command: &str, method: &str, cfg: &TrainConfig, outcome: &StageOutcome) -> Self {
        let state = &outcome.report.state;
        let config = &outcome.best.config;
        Self {
            command: command.into(),
            method: method.into(),
            model_size: outcome.best.param_count(),
            embed_dim: config.embed_dim,
            output_dim: config.output_dim,
            checkpoint: Some(BEST_CHECKPOINT.into()),
            best_dev: state.best_dev,
            best_step: Some(state.best_step),
            global_step: Some(state.global_step),
            epochs: Some(state.epoch),
            stopped_early: Some(state.stopped_early),
            seed: Some(cfg.seed),
            diagnostics: false,
        }
    }

    pub fn for_evaluation(method: &str, ck: &Checkpoint, diagnostics: bool) -> Self {
        Self {
            command: "evaluate".into(),
            method: method.into(),
            model_size: ck.encoder.param_count(),
            embed_dim: ck.encoder.config.embed_dim,
            output_dim: ck.encoder.config.output_dim,
            checkpoint: None,
            best_dev: None,
            best_step: None,
            global_step: None,
            epochs: None,
            stopped_early: None,
            seed: None,
            diagnostics,
        }
    }
}

pub fn fmt_rho(rho: Option<f64>) -> String {
    rho.map_or_else(|| "undefined".into(), |r| format!("{r:.4}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_summary(out: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)? + "\n";
    write(&out.join(SUMMARY_FILE), &text)
}

/// One JSON record per line, a TSV with header, and a fixed-width table.
pub fn write_reports(out: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut jsonl = String::new();
    let mut tsv = format!("{}\n", EvalReport::TSV_HEADER);
    for r in reports {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        let _ = writeln!(tsv, "{}", r.tsv_row());
    }
    write(&out.join(REPORT_JSONL), &jsonl)?;
    write(&out.join(REPORT_TSV), &tsv)?;
    write(&out.join(REPORT_TXT), &render_table(reports))
}

/// Log, final dev report of the best student, and the run summary. The
/// best checkpoint itself is written by the training loop.
pub fn write_training(out: &Path, summary: &RunSummary, outcome: &StageOutcome, dev: &StsPairSet) -> Result<()> {
    outcome.report.write_log(out.join(LOG_FILE))?;
    let report = sts_evaluate(&dev.name, &dev.pairs, &outcome.best)?;
    write_reports(out, &[report])?;
    write_summary(out, summary)
}
