//! Metrics and estimate reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::ReportFormat;
use crate::simlab::MetricsRow;

const CSV_HEADER: [&str; 13] = [
    "label",
    "bias",
    "sd",
    "rmse",
    "se",
    "cvp_percent",
    "n_replicates",
    "n_failures",
    "flagged",
    "bias_x100",
    "sd_x100",
    "rmse_x100",
    "se_x100",
];

/// Fixed-width table with two decimals; rows marked `*` had too many failures.
pub fn render_text(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("no metrics rows to report".into()));
    }
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(9);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>5}",
        "Estimator", "Bias", "SD", "RMSE", "SE", "CVP", "Reps", "Fail"
    );
    for r in rows {
        let flag = if r.flagged { " *" } else { "" };
        let _ = writeln!(
            s,
            "{:<width$} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>6} {:>5}{flag}",
            r.label, r.bias_x100, r.sd_x100, r.rmse_x100, r.se_x100, r.cvp_percent, r.n_replicates, r.n_failures
        );
    }
    s.push_str("Bias, SD, RMSE and SE are multiplied by 100; CVP is in percent.\n");
    Ok(s)
}

/// CSV with unscaled values at full precision followed by the ×100 columns.
pub fn render_csv(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("no metrics rows to report".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            (r.bias_x100 / 100.0).to_string(),
            (r.sd_x100 / 100.0).to_string(),
            (r.rmse_x100 / 100.0).to_string(),
            (r.se_x100 / 100.0).to_string(),
            r.cvp_percent.to_string(),
            r.n_replicates.to_string(),
            r.n_failures.to_string(),
            r.flagged.to_string(),
            r.bias_x100.to_string(),
            r.sd_x100.to_string(),
            r.rmse_x100.to_string(),
            r.se_x100.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(rows: &[MetricsRow], format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Text => render_text(rows)?,
        ReportFormat::Csv => render_csv(rows)?,
    };
    std::fs::write(path, body)?;
    Ok(())
}

/// Reads a CSV report written by [`write_report`].
pub fn read_report_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::DataRow {
                line,
                column: CSV_HEADER[i].into(),
                message: "missing field".into(),
            })
        };
        let parse = |i: usize| -> Result<f64> {
            field(i)?.parse::<f64>().map_err(|_| Error::DataRow {
                line,
                column: CSV_HEADER[i].into(),
                message: "not a number".into(),
            })
        };
        let count = |i: usize| -> Result<usize> {
            field(i)?.parse::<usize>().map_err(|_| Error::DataRow {
                line,
                column: CSV_HEADER[i].into(),
                message: "not a count".into(),
            })
        };
        rows.push(MetricsRow {
            label: field(0)?.to_string(),
            cvp_percent: parse(5)?,
            n_replicates: count(6)?,
            n_failures: count(7)?,
            flagged: field(8)? == "true",
            bias_x100: parse(9)?,
            sd_x100: parse(10)?,
            rmse_x100: parse(11)?,
            se_x100: parse(12)?,
        });
    }
    Ok(rows)
}

/// Point estimates and standard errors from one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub n: usize,
    pub n_respondents: usize,
    pub provider: String,
    pub g_star: String,
    pub beta: Vec<f64>,
    pub beta_se: Vec<f64>,
    pub theta: f64,
    pub theta_se: f64,
    pub theta_se_method: String,
    pub naive: f64,
    pub iterations: usize,
}

impl EstimateReport {
    pub fn render(&self, format: ReportFormat) -> String {
        let mut params: Vec<(String, f64, f64)> = self
            .beta
            .iter()
            .zip(&self.beta_se)
            .enumerate()
            .map(|(j, (b, s))| (format!("beta{j}"), *b, *s))
            .collect();
        params.push(("theta".into(), self.theta, self.theta_se));
        params.push(("naive_mean".into(), self.naive, f64::NAN));
        let mut s = String::new();
        match format {
            ReportFormat::Csv => {
                s.push_str("parameter,estimate,se\n");
                for (name, est, se) in &params {
                    let _ = writeln!(s, "{name},{est},{se}");
                }
            }
            ReportFormat::Text => {
                let _ = writeln!(
                    s,
                    "n = {} ({} respondents), provider = {}, g* = {}, solver iterations = {}",
                    self.n, self.n_respondents, self.provider, self.g_star, self.iterations
                );
                let _ = writeln!(s, "{:<12} {:>12} {:>12}", "parameter", "estimate", "se");
                for (name, est, se) in &params {
                    let _ = writeln!(s, "{name:<12} {est:>12.6} {se:>12.6}");
                }
                let _ = writeln!(s, "theta standard error: {}", self.theta_se_method);
            }
        }
        s
    }
}
