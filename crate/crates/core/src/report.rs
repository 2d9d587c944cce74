//! Schema checks and the run index handed to external report tooling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::harness::{read_summary, RunSummary, METRICS_HEADER};

pub const INDEX_FILE: &str = "report_data.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Column layout of every file the harness writes, for consumers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schemas {
    pub version: u32,
    pub metrics_csv: Vec<String>,
    pub diagnostics_csv: Vec<String>,
    pub summary_json: Vec<String>,
}

impl Default for Schemas {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            metrics_csv: METRICS_HEADER.iter().map(|s| s.to_string()).collect(),
            diagnostics_csv: diagnostics::CSV_HEADER.iter().map(|s| s.to_string()).collect(),
            summary_json: [
                "run_id",
                "config_hash",
                "status",
                "final_loss",
                "final_train_loss",
                "initial_train_loss",
                "steps_completed",
                "norm",
                "optimizer",
                "seed",
                "reason",
                "wall_seconds",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaIssue {
    pub file: PathBuf,
    pub problem: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedRun {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub diagnostics: PathBuf,
    pub partial_logs: bool,
    pub metrics_rows: usize,
    pub diagnostics_rows: usize,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub schemas: Schemas,
    pub runs: Vec<IndexedRun>,
}

/// Checks that a CSV has exactly `header` and that every row has the same
/// width. Returns the data row count.
fn check_csv(path: &Path, header: &[&str], issues: &mut Vec<SchemaIssue>) -> usize {
    let issue = |problem: String| SchemaIssue {
        file: path.to_path_buf(),
        problem,
    };
    let mut reader = match csv::ReaderBuilder::new().has_headers(true).from_path(path) {
        Ok(r) => r,
        Err(e) => {
            issues.push(issue(e.to_string()));
            return 0;
        }
    };
    match reader.headers() {
        Ok(h) if h.iter().eq(header.iter().copied()) => {}
        Ok(h) => {
            issues.push(issue(format!("header {:?} does not match {:?}", h.iter().collect::<Vec<_>>(), header)));
            return 0;
        }
        Err(e) => {
            issues.push(issue(e.to_string()));
            return 0;
        }
    }
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        match rec {
            Ok(_) => rows += 1,
            Err(e) => {
                issues.push(issue(format!("row {}: {e}", i + 1)));
                break;
            }
        }
    }
    rows
}

/// Validates one run directory against the schemas.
pub fn index_run(dir: &Path) -> Result<IndexedRun, Vec<SchemaIssue>> {
    let mut issues = Vec::new();
    let metrics = dir.join("metrics.csv");
    let diags = dir.join("diagnostics.csv");
    let metrics_rows = check_csv(&metrics, &METRICS_HEADER, &mut issues);
    let diagnostics_rows = check_csv(&diags, &diagnostics::CSV_HEADER, &mut issues);
    let summary = match read_summary(dir) {
        Ok(s) => Some(s),
        Err(e) => {
            issues.push(SchemaIssue {
                file: dir.join("summary.json"),
                problem: e.to_string(),
            });
            None
        }
    };
    match summary {
        Some(summary) if issues.is_empty() => Ok(IndexedRun {
            dir: dir.to_path_buf(),
            partial_logs: [&metrics, &diags].iter().any(|p| diagnostics::partial_marker(p).exists()),
            metrics,
            diagnostics: diags,
            metrics_rows,
            diagnostics_rows,
            summary,
        }),
        _ => Err(issues),
    }
}

/// Run directories directly under `root` (those named `run_*`), sorted.
pub fn discover_runs(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Indexes every directory, collecting all schema issues instead of
/// stopping at the first.
pub fn build_index(dirs: &[PathBuf]) -> Result<ReportIndex, Vec<SchemaIssue>> {
    let mut runs = Vec::new();
    let mut issues = Vec::new();
    for d in dirs {
        match index_run(d) {
            Ok(r) => runs.push(r),
            Err(mut e) => issues.append(&mut e),
        }
    }
    if issues.is_empty() {
        Ok(ReportIndex {
            schemas: Schemas::default(),
            runs,
        })
    } else {
        Err(issues)
    }
}
