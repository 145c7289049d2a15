//! Monte Carlo summary metrics.
//!
//! Variance uses the population convention (divide by the replication
//! count `R`), so `mse = bias² + variance` holds exactly up to rounding.
//! Coverage is the percentage of replications whose interval contains the
//! true effect.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dr::DrEstimate;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub mse: Option<f64>,
    pub coverage_pct: Option<f64>,
    pub pe: Option<f64>,
    pub replications: usize,
}

/// Summarises one method. Either list may be empty (an estimator without a
/// predictor, or the reverse), but not both.
pub fn aggregate(method: &str, tau_true: f64, estimates: &[DrEstimate], pe_values: &[f64]) -> Result<MetricRow> {
    let taus: Vec<f64> = estimates.iter().map(|e| e.tau_hat).collect();
    let covered = estimates.iter().filter(|e| e.covers(tau_true)).count();
    aggregate_values(method, tau_true, &taus, covered, pe_values)
}

/// As [`aggregate`], from raw estimates and a count of covering intervals.
pub fn aggregate_values(method: &str, tau_true: f64, taus: &[f64], covered: usize, pe_values: &[f64]) -> Result<MetricRow> {
    if taus.is_empty() && pe_values.is_empty() {
        return invalid(format!("no results to aggregate for {method}"));
    }
    if covered > taus.len() {
        return invalid("more covering intervals than estimates");
    }
    let mut row = MetricRow {
        method: method.to_string(),
        bias: None,
        variance: None,
        mse: None,
        coverage_pct: None,
        pe: None,
        replications: taus.len().max(pe_values.len()),
    };
    if !taus.is_empty() {
        let r = taus.len() as f64;
        let mean = taus.iter().sum::<f64>() / r;
        row.bias = Some(mean - tau_true);
        row.variance = Some(taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / r);
        row.mse = Some(taus.iter().map(|t| (t - tau_true) * (t - tau_true)).sum::<f64>() / r);
        row.coverage_pct = Some(100.0 * covered as f64 / r);
    }
    if !pe_values.is_empty() {
        row.pe = Some(pe_values.iter().sum::<f64>() / pe_values.len() as f64);
    }
    Ok(row)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: [&str; 7] = ["method", "bias", "variance", "mse", "coverage_pct", "pe", "replications"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pretty(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

impl MetricTable {
    pub fn row(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Full-precision CSV; missing metrics are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                cell(r.bias),
                cell(r.variance),
                cell(r.mse),
                cell(r.coverage_pct),
                cell(r.pe),
                r.replications.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# variance: population convention (divide by R); coverage: % of replications whose 95% CI contains tau");
        let _ = writeln!(s, "{:<18}{:>10}{:>11}{:>10}{:>12}{:>9}{:>6}", "Method", "Bias", "Variance", "MSE", "Coverage(%)", "PE", "R");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18}{:>10}{:>11}{:>10}{:>12}{:>9}{:>6}",
                r.method,
                pretty(r.bias, 4),
                pretty(r.variance, 4),
                pretty(r.mse, 4),
                pretty(r.coverage_pct, 1),
                pretty(r.pe, 4),
                r.replications
            );
        }
        s
    }
}
