//! Leakage metrics: accuracy, weighted F1, adversarial advantage over a
//! baseline, per-class breakdown, and Cohen's d between latency groups.

use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::util::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Random guessing among `k` classes: `100 / k`.
    #[default]
    Uniform,
    /// Always guessing the most frequent class.
    EmpiricalPrior,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::EmpiricalPrior => "empirical_prior",
        }
    }
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<(), AttackError> {
    if pred.len() != truth.len() {
        return Err(AttackError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(AttackError::EmptyInput);
    }
    Ok(())
}

/// Percentage of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, AttackError> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// `confusion[t][p]` counts rows with truth `t` predicted as `p`.
pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>, AttackError> {
    check_lengths(pred, truth)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(AttackError::LabelOutOfRange {
                label: p.max(t),
                n_classes: k,
            });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 per class, as fractions in `[0, 1]`. An
/// undefined ratio (zero denominator) is reported as 0.
pub fn per_class(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<ClassMetrics>, AttackError> {
    let m = confusion(pred, truth, k)?;
    Ok((0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|row| row[c]).sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: c,
                support,
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1, as a fraction.
pub fn weighted_f1(pred: &[usize], truth: &[usize]) -> Result<f64, AttackError> {
    check_lengths(pred, truth)?;
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let rows = per_class(pred, truth, k)?;
    let n = truth.len() as f64;
    Ok(rows.iter().map(|r| r.f1 * r.support as f64 / n).sum())
}

/// Percentage of `truth` in each class.
pub fn class_priors(truth: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &t in truth {
        if t < k {
            counts[t] += 1;
        }
    }
    let n = truth.len().max(1) as f64;
    counts.iter().map(|&c| 100.0 * c as f64 / n).collect()
}

/// Overall baseline accuracy in percent.
pub fn baseline_pct(kind: BaselineKind, truth: &[usize], k: usize) -> f64 {
    match kind {
        BaselineKind::Uniform => 100.0 / k as f64,
        BaselineKind::EmpiricalPrior => class_priors(truth, k).into_iter().fold(0.0, f64::max),
    }
}

/// Baseline for one class's recall: `100 / k`, or that class's prior.
pub fn class_baseline_pct(kind: BaselineKind, truth: &[usize], k: usize, class: usize) -> f64 {
    match kind {
        BaselineKind::Uniform => 100.0 / k as f64,
        BaselineKind::EmpiricalPrior => class_priors(truth, k)[class],
    }
}

/// Percentage points above the baseline.
pub fn adversarial_advantage(accuracy_pct: f64, baseline_pct: f64) -> f64 {
    accuracy_pct - baseline_pct
}

/// Cohen's d with pooled sample standard deviation. Identical constant
/// samples give 0; distinct constant samples are
/// [`AttackError::DegenerateSample`].
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, AttackError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AttackError::InsufficientSample {
            len: a.len().min(b.len()),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let ss = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let pooled_var = (ss(a, ma) + ss(b, mb)) / (a.len() + b.len() - 2) as f64;
    let diff = ma - mb;
    if pooled_var == 0.0 {
        return if diff == 0.0 {
            Ok(0.0)
        } else {
            Err(AttackError::DegenerateSample)
        };
    }
    Ok(diff / pooled_var.sqrt())
}

/// Pairwise `|d|` between groups. A degenerate pair is reported as
/// `f64::INFINITY`.
pub fn cohens_d_matrix(groups: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AttackError> {
    let k = groups.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = match cohens_d(&groups[i], &groups[j]) {
                Ok(d) => d.abs(),
                Err(AttackError::DegenerateSample) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Mean of the strictly upper triangle.
pub fn mean_pairwise(matrix: &[Vec<f64>]) -> f64 {
    let vals: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().skip(i + 1).copied())
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        mean(&vals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassLeakage {
    pub attribute: usize,
    pub support: usize,
    pub prior_pct: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub baseline_pct: f64,
    pub advantage_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub baseline: BaselineKind,
    pub baseline_pct: f64,
    pub advantage_pp: f64,
    pub per_class: Vec<ClassLeakage>,
    pub cohens_d: Vec<Vec<f64>>,
    pub mean_abs_d: f64,
}

impl LeakageReport {
    /// `latency_groups[c]` holds the latency profiles of attribute `c`.
    pub fn build(
        pred: &[usize],
        truth: &[usize],
        k: usize,
        baseline: BaselineKind,
        latency_groups: &[Vec<f64>],
    ) -> Result<Self, AttackError> {
        let accuracy = accuracy(pred, truth)?;
        let base = baseline_pct(baseline, truth, k);
        let priors = class_priors(truth, k);
        let per_class = per_class(pred, truth, k)?
            .into_iter()
            .map(|m| {
                let b = class_baseline_pct(baseline, truth, k, m.class);
                ClassLeakage {
                    attribute: m.class,
                    support: m.support,
                    prior_pct: priors[m.class],
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                    baseline_pct: b,
                    advantage_pp: adversarial_advantage(100.0 * m.recall, b),
                }
            })
            .collect();
        let d = cohens_d_matrix(latency_groups)?;
        Ok(Self {
            accuracy,
            weighted_f1: weighted_f1(pred, truth)?,
            baseline,
            baseline_pct: base,
            advantage_pp: adversarial_advantage(accuracy, base),
            per_class,
            mean_abs_d: mean_pairwise(&d),
            cohens_d: d,
        })
    }
}
