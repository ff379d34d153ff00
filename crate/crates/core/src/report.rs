//! Side-by-side comparison of simulation reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{cost_reduction, MetricsReport, Scheme};

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("need at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("report {index} ran workload {found}, report 0 ran {expected}")]
    WorkloadMismatch {
        index: usize,
        expected: String,
        found: String,
    },
}

/// One report's metrics and their change relative to the first report.
///
/// `*_change` columns are relative (`value / first - 1`).
/// `reuse_rate_change_pts` is an absolute difference in percentage points.
/// `cost_reduction` is `1 - 1 / (1 + request_throughput_change)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: Scheme,
    pub avg_latency: f64,
    pub request_throughput: f64,
    pub input_token_throughput: f64,
    pub reuse_rate: f64,
    pub avg_latency_change: f64,
    pub request_throughput_change: f64,
    pub input_token_throughput_change: f64,
    pub reuse_rate_change_pts: f64,
    pub cost_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub workload_fingerprint: String,
    pub rows: Vec<ComparisonRow>,
}

pub const CSV_HEADER: &str = "scheme,avg_latency,request_throughput,input_token_throughput,reuse_rate,\
avg_latency_change,request_throughput_change,input_token_throughput_change,reuse_rate_change_pts,cost_reduction";

pub fn compare(reports: &[MetricsReport]) -> Result<Comparison, CompareError> {
    if reports.len() < 2 {
        return Err(CompareError::TooFewReports(reports.len()));
    }
    let first = &reports[0];
    for (index, r) in reports.iter().enumerate().skip(1) {
        if r.workload_fingerprint != first.workload_fingerprint {
            return Err(CompareError::WorkloadMismatch {
                index,
                expected: first.workload_fingerprint.clone(),
                found: r.workload_fingerprint.clone(),
            });
        }
    }
    let rel = |v: f64, base: f64| v / base - 1.0;
    let rows = reports
        .iter()
        .map(|r| {
            let thr_change = rel(r.request_throughput, first.request_throughput);
            ComparisonRow {
                scheme: r.scheme,
                avg_latency: r.avg_latency,
                request_throughput: r.request_throughput,
                input_token_throughput: r.input_token_throughput,
                reuse_rate: r.reuse_rate,
                avg_latency_change: rel(r.avg_latency, first.avg_latency),
                request_throughput_change: thr_change,
                input_token_throughput_change: rel(r.input_token_throughput, first.input_token_throughput),
                reuse_rate_change_pts: 100.0 * (r.reuse_rate - first.reuse_rate),
                cost_reduction: cost_reduction(thr_change).expect("throughput ratio is positive"),
            }
        })
        .collect();
    Ok(Comparison {
        workload_fingerprint: first.workload_fingerprint.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.9},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6}\n",
                r.scheme,
                r.avg_latency,
                r.request_throughput,
                r.input_token_throughput,
                r.reuse_rate,
                r.avg_latency_change,
                r.request_throughput_change,
                r.input_token_throughput_change,
                r.reuse_rate_change_pts,
                r.cost_reduction
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:+.1}%", 100.0 * v);
        let header = [
            "scheme", "latency", "Δlatency", "req/unit", "Δreq", "tok/unit", "Δtok", "reuse", "Δreuse", "cost cut",
        ];
        let mut cells: Vec<[String; 10]> = vec![header.map(String::from)];
        for r in &self.rows {
            cells.push([
                r.scheme.to_string(),
                format!("{:.1}", r.avg_latency),
                pct(r.avg_latency_change),
                format!("{:.5}", r.request_throughput),
                pct(r.request_throughput_change),
                format!("{:.2}", r.input_token_throughput),
                pct(r.input_token_throughput_change),
                format!("{:.1}%", 100.0 * r.reuse_rate),
                format!("{:+.1}pt", r.reuse_rate_change_pts),
                format!("{:.1}%", 100.0 * r.cost_reduction),
            ]);
        }
        let widths: Vec<usize> = (0..10)
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if i == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
