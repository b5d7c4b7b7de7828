//! Evaluation reports: machine records plus a methods-by-cases table.
//!
//! Files written by [`emit_report`]:
//! `report.csv` and `report.json` (one record per method and case),
//! `frames.csv` (per-frame metrics) and `report.md` (the human table).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surgidepth::metrics::EvalResult;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const FRAMES_CSV: &str = "frames.csv";

/// `(method, result)` pairs; the method labels a table row, the result's
/// case name a column.
pub type EvalResults = [(String, EvalResult)];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no evaluation results to report")]
    Empty,
    #[error("method `{method}` has two results for case `{case}`")]
    Duplicate { method: String, case: String },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot serialise report: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    pub case: String,
    pub n_frames: usize,
    pub abs_rel: f64,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub method: String,
    pub case: String,
    pub id: String,
    pub abs_rel: f64,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportDocument {
    pub records: Vec<ReportRecord>,
    pub frames: Vec<FrameRecord>,
    /// Row labels in first-appearance order.
    pub methods: Vec<String>,
    /// Column labels in first-appearance order.
    pub cases: Vec<String>,
    /// Markdown table.
    pub table: String,
}

/// The rounding used in the human table.
pub fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

pub fn cell(abs_rel: f64, delta1: f64) -> String {
    format!("{} / {}", fmt3(abs_rel), fmt3(delta1))
}

impl ReportDocument {
    pub fn build(results: &EvalResults) -> Result<Self, ReportError> {
        if results.is_empty() {
            return Err(ReportError::Empty);
        }
        let mut records: Vec<ReportRecord> = Vec::new();
        let mut frames = Vec::new();
        let (mut methods, mut cases) = (Vec::<String>::new(), Vec::<String>::new());
        for (method, r) in results {
            if records.iter().any(|x| &x.method == method && x.case == r.case_name) {
                return Err(ReportError::Duplicate { method: method.clone(), case: r.case_name.clone() });
            }
            if !methods.contains(method) {
                methods.push(method.clone());
            }
            if !cases.contains(&r.case_name) {
                cases.push(r.case_name.clone());
            }
            records.push(ReportRecord {
                method: method.clone(),
                case: r.case_name.clone(),
                n_frames: r.n_frames,
                abs_rel: r.abs_rel,
                delta1: r.delta1,
            });
            frames.extend(r.per_frame.iter().map(|f| FrameRecord {
                method: method.clone(),
                case: r.case_name.clone(),
                id: f.id.clone(),
                abs_rel: f.abs_rel,
                delta1: f.delta1,
            }));
        }
        let mut table = String::from("| Method |");
        for c in &cases {
            table.push_str(&format!(" {c} (Abs. Rel. ↓ / δ₁ ↑) |"));
        }
        table.push_str("\n|---|");
        table.push_str(&"---|".repeat(cases.len()));
        table.push('\n');
        for m in &methods {
            table.push_str(&format!("| {m} |"));
            for c in &cases {
                let text = records
                    .iter()
                    .find(|r| &r.method == m && &r.case == c)
                    .map_or_else(|| "-".to_string(), |r| cell(r.abs_rel, r.delta1));
                table.push_str(&format!(" {text} |"));
            }
            table.push('\n');
        }
        Ok(Self { records, frames, methods, cases, table })
    }

    /// The table cell for `method` on `case`.
    pub fn cell(&self, method: &str, case: &str) -> Option<String> {
        self.records
            .iter()
            .find(|r| r.method == method && r.case == case)
            .map(|r| cell(r.abs_rel, r.delta1))
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ReportError::Serialize(e.to_string()))?;
    }
    w.into_inner().map_err(|e| ReportError::Serialize(e.to_string()))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), ReportError> {
    let path = dir.join(name);
    surgidepth::write_atomic(&path, bytes).map_err(|source| ReportError::Io { path, source })
}

/// Builds the report and writes all four files into `out_dir` (created if
/// needed).
pub fn emit_report(results: &EvalResults, out_dir: impl AsRef<Path>) -> Result<ReportDocument, ReportError> {
    let dir = out_dir.as_ref();
    let doc = ReportDocument::build(results)?;
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    let json = serde_json::to_string_pretty(&doc.records).map_err(|e| ReportError::Serialize(e.to_string()))?;
    write(dir, REPORT_CSV, &to_csv(&doc.records)?)?;
    write(dir, REPORT_JSON, format!("{json}\n").as_bytes())?;
    write(dir, FRAMES_CSV, &to_csv(&doc.frames)?)?;
    write(dir, REPORT_MD, doc.table.as_bytes())?;
    Ok(doc)
}
