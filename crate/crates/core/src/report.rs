//! CSV report emission for experiment results.

use std::path::Path;

use crate::attack::LeakageReport;
use crate::experiment::{AttackRun, DefenseRow, Histogram, ScalingRow, Victim};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("i/o failure on {path}: {msg}")]
pub struct ReportError {
    pub path: String,
    pub msg: String,
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), ReportError> {
    let err = |e: csv::Error| ReportError {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| ReportError {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// One metrics row: `experiment,accuracy,weighted_f1,baseline,baseline_pct,advantage_pp,mean_abs_d,cluster_accuracy`.
pub fn write_leakage(path: &Path, experiment: &str, run: &AttackRun) -> Result<(), ReportError> {
    let r = &run.report;
    write_table(
        path,
        &strings(&[
            "experiment",
            "accuracy",
            "weighted_f1",
            "baseline",
            "baseline_pct",
            "advantage_pp",
            "mean_abs_d",
            "cluster_accuracy",
        ]),
        &[vec![
            experiment.to_string(),
            fmt(r.accuracy),
            fmt(100.0 * r.weighted_f1),
            r.baseline.as_str().to_string(),
            fmt(r.baseline_pct),
            fmt(r.advantage_pp),
            fmt(r.mean_abs_d),
            run.cluster_accuracy.map(fmt).unwrap_or_default(),
        ]],
    )
}

pub fn write_per_class(path: &Path, report: &LeakageReport) -> Result<(), ReportError> {
    let rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|c| {
            vec![
                c.attribute.to_string(),
                c.support.to_string(),
                fmt(c.prior_pct),
                fmt(100.0 * c.precision),
                fmt(100.0 * c.recall),
                fmt(100.0 * c.f1),
                fmt(c.baseline_pct),
                fmt(c.advantage_pp),
            ]
        })
        .collect();
    write_table(
        path,
        &strings(&[
            "attribute",
            "support",
            "prior_pct",
            "precision",
            "recall",
            "f1",
            "baseline_pct",
            "advantage_pp",
        ]),
        &rows,
    )
}

/// Square matrix with an `attribute` label column.
pub fn write_d_matrix(path: &Path, report: &LeakageReport) -> Result<(), ReportError> {
    let k = report.cohens_d.len();
    let mut header = vec!["attribute".to_string()];
    header.extend((0..k).map(|j| format!("a{j}")));
    let rows: Vec<Vec<String>> = report
        .cohens_d
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![format!("a{i}")];
            r.extend(row.iter().map(|&d| fmt(d)));
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `bin_center,count_a0,count_a1,...`
pub fn write_histogram(path: &Path, h: &Histogram) -> Result<(), ReportError> {
    let k = h.counts.first().map_or(0, Vec::len);
    let mut header = vec!["bin_center".to_string()];
    header.extend((0..k).map(|c| format!("count_a{c}")));
    let rows: Vec<Vec<String>> = h
        .bin_centers
        .iter()
        .zip(&h.counts)
        .map(|(c, counts)| {
            let mut r = vec![fmt(*c)];
            r.extend(counts.iter().map(|n| n.to_string()));
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `attribute,mean_sparsity` plus a final `train_accuracy` row.
pub fn write_victim(path: &Path, victim: &Victim) -> Result<(), ReportError> {
    let mut rows: Vec<Vec<String>> = victim
        .class_sparsity
        .iter()
        .enumerate()
        .map(|(a, s)| vec![format!("a{a}"), fmt(*s)])
        .collect();
    rows.push(vec!["train_accuracy".into(), fmt(victim.train_accuracy)]);
    write_table(path, &strings(&["key", "value"]), &rows)
}

pub fn write_defenses(path: &Path, rows: &[DefenseRow]) -> Result<(), ReportError> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.defense.as_str().to_string(),
                fmt(r.accuracy),
                fmt(r.advantage_pp),
                fmt(r.overhead_fraction),
                fmt(r.energy_ratio),
                fmt(r.latency_inflation),
                fmt(r.violation_rate),
                r.budget_cycles.map(fmt).unwrap_or_default(),
            ]
        })
        .collect();
    write_table(
        path,
        &strings(&[
            "defense",
            "accuracy",
            "advantage_pp",
            "overhead_fraction",
            "energy_ratio",
            "latency_inflation",
            "violation_rate",
            "budget_cycles",
        ]),
        &body,
    )
}

pub fn write_scaling(path: &Path, rows: &[ScalingRow]) -> Result<(), ReportError> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.width.to_string(),
                r.depth.to_string(),
                r.params.to_string(),
                r.activations.to_string(),
                fmt(r.mean_abs_d),
                fmt(r.accuracy),
            ]
        })
        .collect();
    write_table(
        path,
        &strings(&["width", "depth", "params", "activations", "mean_abs_d", "accuracy"]),
        &body,
    )
}
