use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use divdec_core::metrics::{EvalReport, REPORT_COLUMNS};

use crate::artifacts::{ensure_parent, read_eval_csv, Layout};

/// Report rows in display order: (label, system name of the eval file).
pub const SYSTEMS: [(&str, &str); 8] = [
    ("Greedy", "greedy"),
    ("Beam", "beam"),
    ("MMI", "mmi"),
    ("Top-k (best)", "topk-best"),
    ("Nucleus (matched)", "nucleus-matched"),
    ("MCD-Exact", "mcd-exact"),
    ("MCD-DAgger", "mcd-dagger"),
    ("MCD-LOLS", "mcd-lols"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// `None` when the system's evaluation is missing.
    pub report: Option<EvalReport>,
}

pub fn collect(layout: &Layout) -> Result<Vec<ReportRow>> {
    SYSTEMS
        .iter()
        .map(|(label, sys)| {
            let p = layout.eval(sys);
            let report = if p.exists() { Some(read_eval_csv(&p)?) } else { None };
            Ok(ReportRow {
                label: label.to_string(),
                report,
            })
        })
        .collect()
}

fn cells(r: &ReportRow) -> Vec<String> {
    match &r.report {
        Some(e) => e.values().iter().map(|v| format!("{v:.4}")).collect(),
        None => vec!["-".to_string(); REPORT_COLUMNS.len()],
    }
}

pub fn markdown(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| System | {} | Present |", REPORT_COLUMNS.join(" | "));
    let _ = writeln!(s, "|---|{}---|", "---:|".repeat(REPORT_COLUMNS.len()));
    for r in rows {
        let present = if r.report.is_some() { "yes" } else { "absent" };
        let _ = writeln!(s, "| {} | {} | {present} |", r.label, cells(r).join(" | "));
    }
    s
}

pub fn write(rows: &[ReportRow], md: &Path, csv_path: &Path) -> Result<()> {
    ensure_parent(md)?;
    std::fs::write(md, markdown(rows))?;
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec!["System"];
    header.extend(REPORT_COLUMNS);
    header.push("Present");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(cells(r));
        rec.push(if r.report.is_some() { "yes" } else { "absent" }.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
