//! Table-style summary over every finished run in a directory.

use std::fs;
use std::path::Path;

use super::{io_err, HarnessError, RunResult, RESULT_FILE};
use crate::prune::FLOP_CONVENTION;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

pub const REPORT_COLUMNS: [&str; 14] = [
    "run",
    "method",
    "lambda1",
    "lambda2",
    "gate_kind",
    "threshold",
    "signature",
    "params_before",
    "params_after",
    "pruning_rate",
    "flops_before",
    "flops_after",
    "error_before_ft",
    "error_after_ft",
];

/// One report line, already rendered to text so the markdown and CSV
/// outputs carry identical values.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub fields: Vec<String>,
}

impl ReportRow {
    pub fn from_result(r: &RunResult) -> Self {
        let p = &r.report;
        let fields = vec![
            r.run.clone(),
            r.method.as_str().to_string(),
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            p.gate_kind.as_str().to_string(),
            p.threshold.to_string(),
            p.signature.clone(),
            p.params_before.to_string(),
            p.params_after.to_string(),
            format!("{:.4}", p.pruning_rate()),
            p.flops_before.to_string(),
            p.flops_after.to_string(),
            format!("{:.2}", r.error_before_ft),
            format!("{:.2}", r.error_after_ft),
        ];
        ReportRow { fields }
    }

    pub fn get(&self, column: &str) -> Option<&str> {
        REPORT_COLUMNS.iter().position(|&c| c == column).map(|i| self.fields[i].as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Expected runs without a `result.json`, and unreadable results.
    pub missing: Vec<String>,
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Pruning results\n\n");
        s.push_str(&format!("FLOPs: {FLOP_CONVENTION}. Errors are test errors in percent.\n\n"));
        s.push_str(&format!("| {} |\n", REPORT_COLUMNS.join(" | ")));
        s.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
        for row in &self.rows {
            s.push_str(&format!("| {} |\n", row.fields.join(" | ")));
        }
        if !self.missing.is_empty() {
            s.push_str("\nMissing runs:\n\n");
            for m in &self.missing {
                s.push_str(&format!("- {m}\n"));
            }
        }
        s
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for row in &self.rows {
            w.write_record(&row.fields)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Collects `result.json` from every subdirectory of `runs_dir` (sorted by
/// name), lists `expected` runs that have none, and writes `report.md` and
/// `report.csv` into `runs_dir`.
pub fn cmd_report(runs_dir: &Path, expected: &[&str]) -> Result<Report, HarnessError> {
    let mut dirs: Vec<_> = fs::read_dir(runs_dir)
        .map_err(io_err(runs_dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let mut seen = Vec::new();
    for dir in dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let path = dir.join(RESULT_FILE);
        if !path.exists() {
            continue;
        }
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<RunResult>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(result) => {
                rows.push(ReportRow::from_result(&result));
                seen.push(name);
            }
            Err(e) => missing.push(format!("{name} (unreadable {RESULT_FILE}: {e})")),
        }
    }
    for &e in expected {
        if !seen.iter().any(|s| s == e) && !missing.iter().any(|m| m.starts_with(&format!("{e} "))) {
            missing.push(format!("{e} (no {RESULT_FILE})"));
        }
    }
    let report = Report { rows, missing };
    let md = runs_dir.join(REPORT_MD);
    fs::write(&md, report.to_markdown()).map_err(io_err(&md))?;
    let csv_path = runs_dir.join(REPORT_CSV);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    report.write_csv(file)?;
    Ok(report)
}
