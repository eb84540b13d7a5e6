//! Result presentation: plain-text tables, CSV emission and aggregation of
//! experiment records into a ΔR summary.

use std::collections::BTreeMap;
use std::path::Path;

use mmfinger_core::verify::VerificationReport;

use crate::error::{CliError, CliResult};
use crate::pipeline::ExperimentRecord;

/// A rectangular result table renderable as aligned text or CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<&str>, rows: Vec<Vec<String>>) -> Self {
        let headers: Vec<String> = headers.into_iter().map(String::from).collect();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), headers.len(), "table row {i} width mismatch");
        }
        Table { headers, rows }
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let fmt_row = |cells: &[String], widths: &[usize]| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        out.push_str(&fmt_row(&self.headers, &widths));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&fmt_row(row, &widths));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let escape = |cell: &str| -> String {
            if cell.contains([',', '"', '\n']) {
                format!("\"{}\"", cell.replace('"', "\"\""))
            } else {
                cell.to_string()
            }
        };
        let mut out = String::new();
        out.push_str(
            &self
                .headers
                .iter()
                .map(|h| escape(h))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|c| escape(c)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| CliError::io(path, e))
    }
}

/// Human-readable rendering of one verification report.
pub fn report_table(report: &VerificationReport) -> Table {
    let mut rows = Vec::new();
    rows.push(vec![
        "decision".into(),
        format!("{:?}", report.decision).to_lowercase(),
    ]);
    rows.push(vec!["clean_r1".into(), format!("{:.4}", report.clean_r1)]);
    rows.push(vec!["k_o".into(), report.k_o.clone()]);
    rows.push(vec!["k_adv".into(), report.k_adv.clone()]);
    if let Some(m) = &report.image_to_text {
        for (k, v) in &m.vsr_at_k {
            rows.push(vec![format!("it_vsr@{k}"), format!("{v:.4}")]);
        }
        for (k, v) in &m.recovery_at_k {
            rows.push(vec![format!("it_recovery@{k}"), format!("{v:.4}")]);
        }
    }
    if let Some(m) = &report.text_to_image {
        for (k, v) in &m.vsr_at_k {
            rows.push(vec![format!("ti_vsr@{k}"), format!("{v:.4}")]);
        }
        for (k, v) in &m.recovery_at_k {
            rows.push(vec![format!("ti_recovery@{k}"), format!("{v:.4}")]);
        }
    }
    if let Some(delta) = &report.delta_r {
        for (k, v) in delta {
            rows.push(vec![format!("delta_r@{k}"), format!("{v:.4}")]);
        }
    }
    Table::new(vec!["metric", "value"], rows)
}

/// Aggregate verification reports (JSON files produced by `verify`) into a
/// ΔR table: one row per K, VSR columns per report.
pub fn cmd_report(paths: &[std::path::PathBuf]) -> CliResult<Table> {
    let mut names = Vec::new();
    let mut per_k: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut records = 0usize;
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if let Ok(report) = serde_json::from_str::<VerificationReport>(&text) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("report");
            names.push(stem.to_string());
            if let Some(m) = report.primary_metrics() {
                for (k, v) in &m.vsr_at_k {
                    per_k.entry(*k).or_default().push(format!("{v:.4}"));
                }
            }
            records += 1;
        } else if serde_json::from_str::<ExperimentRecord>(&text).is_ok() {
            // experiment records carry no VSR tables themselves
            continue;
        } else {
            return Err(CliError::validation(format!(
                "{}: neither a verification report nor an experiment record",
                path.display()
            )));
        }
    }
    let _ = records;
    let mut headers = vec!["K".to_string()];
    headers.extend(names.iter().cloned());
    let rows: Vec<Vec<String>> = per_k
        .into_iter()
        .map(|(k, mut vals)| {
            let mut row = vec![format!("{k}")];
            // missing cells (reports with fewer Ks) padded empty
            vals.resize(names.len(), String::new());
            row.append(&mut vals);
            row
        })
        .collect();
    Ok(Table { headers, rows })
}
