//! Synthetic tabular population with a hidden sensitive attribute.
//!
//! Each row carries non-sensitive client features, a sensitive attribute in
//! `0..k_sensitive`, and a task label. Client features of attribute class `c`
//! are Gaussian around a class mean `μ_c`; the means sit on the vertices of a
//! regular simplex with pairwise distance `separation` (`μ_c = separation/√2 · e_c`)
//! when there are at least `k_sensitive` features, and on an evenly spaced line
//! along the first axis otherwise.
//!
//! The task label is `argmax_t (x·U_t/√n + V_t[attribute])` for fixed
//! standard-normal matrices `U` and `V` drawn from the generator seed, so a
//! model solving the task has to use the attribute.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::seed;
use crate::util::argmax;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    FractionSumInvalid([f64; 3]),
    #[error("i/o failure on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed row at line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub k_sensitive: usize,
    pub n_client_features: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub feature_noise: f64,
    pub task_classes: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_owned()));
        if self.k_sensitive < 2 {
            return bad("k_sensitive must be >= 2");
        }
        if self.n_client_features == 0 {
            return bad("n_client_features must be >= 1");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be finite and >= 0");
        }
        if !(self.feature_noise > 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and > 0");
        }
        if self.task_classes < 2 {
            return bad("task_classes must be >= 2");
        }
        Ok(())
    }

    /// Class-conditional feature means.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let (k, n) = (self.k_sensitive, self.n_client_features);
        (0..k)
            .map(|c| {
                let mut mu = vec![0.0; n];
                if n >= k {
                    mu[c] = self.separation / std::f64::consts::SQRT_2;
                } else {
                    mu[0] = c as f64 * self.separation;
                }
                mu
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Unassigned,
    Train,
    Aux,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Unassigned => "none",
            Split::Train => "train",
            Split::Aux => "aux",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Split::Unassigned,
            "train" => Split::Train,
            "aux" => Split::Aux,
            "test" => Split::Test,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub identifier: String,
    pub split: Split,
    pub attribute: usize,
    pub task_label: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub k_sensitive: usize,
    pub rows: Vec<Record>,
}

impl LabeledDataset {
    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn n_features(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn task_classes(&self) -> usize {
        self.rows.iter().map(|r| r.task_label + 1).max().unwrap_or(0)
    }
}

pub fn generate(cfg: &GenConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let n = cfg.n_client_features;
    let means = cfg.class_means();
    let noise = Normal::new(0.0, cfg.feature_noise).expect("validated feature_noise");

    let mut task_rng = seed::rng(seed::derive(cfg.seed, seed::stream::GEN_TASK, 0));
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut task_rng)).collect() };
    let u: Vec<Vec<f64>> = (0..cfg.task_classes).map(|_| draw(n)).collect();
    let v: Vec<Vec<f64>> = (0..cfg.task_classes).map(|_| draw(cfg.k_sensitive)).collect();
    let scale = 1.0 / (n as f64).sqrt();

    let mut rows = Vec::with_capacity(cfg.k_sensitive * cfg.samples_per_class);
    for (c, mu) in means.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream::GEN_CLASS, c as u64));
        for _ in 0..cfg.samples_per_class {
            let features: Vec<f64> = mu.iter().map(|m| m + noise.sample(&mut rng)).collect();
            let scores: Vec<f64> = u
                .iter()
                .zip(&v)
                .map(|(ut, vt)| scale * ut.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>() + vt[c])
                .collect();
            rows.push(Record {
                identifier: String::new(),
                split: Split::Unassigned,
                attribute: c,
                task_label: argmax(&scores),
                features,
            });
        }
    }

    // Identifiers are assigned after shuffling so they carry no class order.
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream::GEN_CLASS, u64::MAX));
    rows.shuffle(&mut rng);
    for (i, r) in rows.iter_mut().enumerate() {
        r.identifier = format!("id{i:06}");
    }
    Ok(LabeledDataset {
        k_sensitive: cfg.k_sensitive,
        rows,
    })
}

/// Stratified, identifier-disjoint train/aux/test assignment.
///
/// Within each attribute class, rows are shuffled by the stream
/// `(seed, class)`; the first `round(f_train·n_c)` become train, the next
/// `round(f_aux·n_c)` aux, and the remainder test.
pub fn split(dataset: &LabeledDataset, fractions: [f64; 3], seed_value: u64) -> Result<LabeledDataset> {
    let valid = fractions.iter().all(|f| *f > 0.0 && f.is_finite()) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if !valid {
        return Err(DataError::FractionSumInvalid(fractions));
    }
    let mut out = dataset.clone();
    for c in 0..dataset.k_sensitive {
        let mut members: Vec<usize> = (0..out.rows.len()).filter(|&i| out.rows[i].attribute == c).collect();
        let mut rng = seed::rng(seed::derive(seed_value, seed::stream::SPLIT, c as u64));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_aux = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (pos, &i) in members.iter().enumerate() {
            out.rows[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_aux {
                Split::Aux
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Writes `identifier,split,attribute,task_label,f0,...`.
pub fn save(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = ["identifier", "split", "attribute", "task_label"].map(String::from).to_vec();
    header.extend((0..dataset.n_features()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in &dataset.rows {
        let mut rec = vec![
            r.identifier.clone(),
            r.split.as_str().to_owned(),
            r.attribute.to_string(),
            r.task_label.to_string(),
        ];
        rec.extend(r.features.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a dataset written by [`save`]. `k_sensitive` is taken as the
/// largest attribute present plus one.
pub fn load(path: &Path) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::EmptyDataset);
    }
    let fixed = ["identifier", "split", "attribute", "task_label"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(DataError::MalformedRow {
            line: 1,
            msg: "header must start with identifier,split,attribute,task_label".into(),
        });
    }
    let width = header.len();

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            DataError::MalformedRow { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let malformed = |msg: String| DataError::MalformedRow { line, msg };
        if rec.len() != width {
            return Err(malformed(format!("expected {width} columns, found {}", rec.len())));
        }
        let split = Split::parse(&rec[1]).ok_or_else(|| malformed(format!("unknown split `{}`", &rec[1])))?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| malformed(format!("column {}: {e}", &header[i])));
        let attribute = int(2)?;
        let task_label = int(3)?;
        let features = (4..width)
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| malformed(format!("column {}: {e}", &header[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(Record {
            identifier: rec[0].to_owned(),
            split,
            attribute,
            task_label,
            features,
        });
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let k_sensitive = rows.iter().map(|r| r.attribute + 1).max().unwrap_or(0);
    Ok(LabeledDataset { k_sensitive, rows })
}

/// Nearest-class-mean classification of the client features, used as a
/// separability oracle.
pub fn nearest_mean_accuracy(dataset: &LabeledDataset, means: &[Vec<f64>]) -> f64 {
    let correct = dataset
        .rows
        .iter()
        .filter(|r| {
            let d: Vec<f64> = means
                .iter()
                .map(|m| -m.iter().zip(&r.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            argmax(&d) == r.attribute
        })
        .count();
    correct as f64 / dataset.rows.len() as f64
}
