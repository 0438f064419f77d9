//! Summaries across run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msreid_core::eval::EvalReport;

use crate::config::{Profile, RunConfig};
use crate::error::{CliResult, IoContext};
use crate::pipeline::FAILED_MARKER;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    Incomplete,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Complete => "COMPLETE",
            RunStatus::Incomplete => "INCOMPLETE",
        }
    }
}

/// Rank-1 and mAP of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioCell {
    pub kind: String,
    pub rank1: f64,
    pub map: f64,
}

/// One run's headline numbers. Metric fields are empty unless evaluation
/// finished.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_dir: PathBuf,
    pub name: String,
    pub seed: Option<u64>,
    pub status: RunStatus,
    /// Why the row is incomplete.
    pub detail: String,
    pub scenarios: Vec<ScenarioCell>,
    pub mean_rank1: Option<f64>,
    pub mean_map: Option<f64>,
    /// Pseudo-label F-score after the last training epoch on record.
    pub final_fscore: Option<f64>,
}

fn last_fscore(path: &Path) -> CliResult<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let col = r.headers()?.iter().position(|h| h == "fscore");
    let mut last = None;
    for rec in r.records() {
        let rec = rec?;
        last = col.and_then(|c| rec.get(c)).and_then(|v| v.parse().ok());
    }
    Ok(last)
}

fn read_config(dir: &Path) -> CliResult<Option<RunConfig>> {
    let path = dir.join("config.toml");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(RunConfig::from_toml_str(&fs::read_to_string(&path).at(&path)?, Profile::Paper)?))
}

fn read_eval(dir: &Path) -> CliResult<Option<EvalReport>> {
    let path = dir.join("eval_report.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?))
}

fn read_fscore(dir: &Path) -> CliResult<Option<f64>> {
    match last_fscore(&dir.join("stage3_metrics.csv"))? {
        Some(f) => Ok(Some(f)),
        None => last_fscore(&dir.join("stage1_metrics.csv")),
    }
}

/// Never fails: unreadable artifacts turn the row incomplete.
fn read_row(dir: &Path) -> ReportRow {
    let mut row = ReportRow {
        run_dir: dir.to_path_buf(),
        name: "?".into(),
        seed: None,
        status: RunStatus::Incomplete,
        detail: String::new(),
        scenarios: Vec::new(),
        mean_rank1: None,
        mean_map: None,
        final_fscore: None,
    };
    let mut problems = Vec::new();
    match read_config(dir) {
        Ok(Some(cfg)) => {
            row.name = cfg.run.name;
            row.seed = Some(cfg.run.seed);
        }
        Ok(None) => problems.push("no config.toml".to_string()),
        Err(e) => problems.push(e.to_string()),
    }
    match read_fscore(dir) {
        Ok(f) => row.final_fscore = f,
        Err(e) => problems.push(e.to_string()),
    }
    let failed = dir.join(FAILED_MARKER).exists();
    if failed {
        problems.push("run failed".into());
    }
    match read_eval(dir) {
        Ok(Some(eval)) => {
            row.scenarios =
                eval.scenarios.iter().map(|s| ScenarioCell { kind: s.kind.clone(), rank1: s.metrics.rank1, map: s.metrics.map }).collect();
            row.mean_rank1 = Some(eval.mean_rank1);
            row.mean_map = Some(eval.mean_map);
        }
        Ok(None) => problems.push("no eval_report.json".into()),
        Err(e) => problems.push(e.to_string()),
    }
    if !failed && row.mean_rank1.is_some() {
        row.status = RunStatus::Complete;
    }
    row.detail = problems.join("; ");
    row
}

pub fn collect_rows(dirs: &[PathBuf]) -> Vec<ReportRow> {
    dirs.iter().map(|d| read_row(d)).collect()
}

/// Scenario kinds in first-seen order across rows.
fn scenario_columns(rows: &[ReportRow]) -> Vec<String> {
    let mut kinds: Vec<String> = Vec::new();
    for cell in rows.iter().flat_map(|r| &r.scenarios) {
        if !kinds.contains(&cell.kind) {
            kinds.push(cell.kind.clone());
        }
    }
    kinds
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn scenario_value(row: &ReportRow, kind: &str, f: fn(&ScenarioCell) -> f64) -> Option<f64> {
    row.scenarios.iter().find(|c| c.kind == kind).map(f)
}

fn write_csv(rows: &[ReportRow], kinds: &[String], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["run_dir", "name", "seed", "status", "detail"].map(String::from).to_vec();
    for k in kinds {
        header.push(format!("{k}_rank1"));
        header.push(format!("{k}_map"));
    }
    header.extend(["mean_rank1", "mean_map", "final_fscore"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        let mut rec = vec![
            r.run_dir.display().to_string(),
            r.name.clone(),
            r.seed.map_or_else(String::new, |s| s.to_string()),
            r.status.as_str().into(),
            r.detail.clone(),
        ];
        for k in kinds {
            rec.push(opt(scenario_value(r, k, |c| c.rank1)));
            rec.push(opt(scenario_value(r, k, |c| c.map)));
        }
        rec.extend([opt(r.mean_rank1), opt(r.mean_map), opt(r.final_fscore)]);
        w.write_record(&rec)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Renders a comparison table of `dirs` (one row per run, Rank-1 and mAP per
/// scenario) and optionally writes the same rows as CSV.
pub fn emit_report(dirs: &[PathBuf], csv_path: Option<&Path>) -> CliResult<String> {
    let rows = collect_rows(dirs);
    let kinds = scenario_columns(&rows);
    if let Some(path) = csv_path {
        write_csv(&rows, &kinds, path)?;
    }
    let mut out = format!("{:<28} {:<6} {:>4} {:<10}", "run", "name", "seed", "status");
    for k in &kinds {
        let _ = write!(out, " {:>17} {:>17}", format!("{k} R1"), format!("{k} mAP"));
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>8}", "R1", "mAP", "F");
    for r in &rows {
        let _ = write!(
            out,
            "{:<28} {:<6} {:>4} {:<10}",
            r.run_dir.display(),
            r.name,
            r.seed.map_or_else(|| "-".into(), |s| s.to_string()),
            r.status.as_str()
        );
        for k in &kinds {
            let _ = write!(out, " {:>17} {:>17}", cell(scenario_value(r, k, |c| c.rank1)), cell(scenario_value(r, k, |c| c.map)));
        }
        let _ = write!(out, " {:>8} {:>8} {:>8}", cell(r.mean_rank1), cell(r.mean_map), cell(r.final_fscore));
        if !r.detail.is_empty() {
            let _ = write!(out, "  ({})", r.detail);
        }
        out.push('\n');
    }
    Ok(out)
}
