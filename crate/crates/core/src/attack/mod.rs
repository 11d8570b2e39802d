//! Black-box attribute inference from observed latency.
//!
//! The attacker knows identifiers and client features, queries the service
//! repeatedly per identifier, and reduces the latencies to a median profile.
//! Profiles with known attributes train a classifier (GBDT, or 1-D k-means
//! anchored on the labeled subset) that then infers attributes of unseen
//! identifiers.

pub mod gbdt;
pub mod kmeans;
pub mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::service::{query_seed, ApiResponse, EnrichmentService, ServiceError};
use crate::util::median;

pub use gbdt::{GbdtConfig, GbdtModel};
pub use kmeans::ClusterModel;
pub use metrics::{BaselineKind, LeakageReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttackError {
    #[error("need at least {k} distinct points to form {k} clusters, got {distinct}")]
    TooFewDistinctPoints { distinct: usize, k: usize },
    #[error("cluster {cluster} has no anchored attribute")]
    AmbiguousCluster { cluster: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("feature layout mismatch: expected {expected} features, got {got}")]
    FeatureLayoutMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric input is empty")]
    EmptyInput,
    #[error("both samples are constant with different values")]
    DegenerateSample,
    #[error("sample of size {len} is too small for a variance estimate")]
    InsufficientSample { len: usize },
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

/// Which observables enter the GBDT feature vector. The latency profile is
/// always the first column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// `[latency]`
    #[default]
    Latency,
    /// `[latency, one_hot(predicted_label)]`
    LatencyLabel,
    /// `[latency, client features…, one_hot(predicted_label)]`
    Full,
}

impl FeatureSet {
    pub fn width(self, n_client: usize, n_labels: usize) -> usize {
        match self {
            Self::Latency => 1,
            Self::LatencyLabel => 1 + n_labels,
            Self::Full => 1 + n_client + n_labels,
        }
    }

    pub fn encode(self, profile: &Profile, n_labels: usize) -> Vec<f64> {
        let mut v = vec![profile.latency];
        if self == Self::Full {
            v.extend_from_slice(&profile.client_features);
        }
        if self != Self::Latency {
            v.extend((0..n_labels).map(|c| if c == profile.predicted_label { 1.0 } else { 0.0 }));
        }
        v
    }
}

/// An identifier to be profiled.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub identifier: String,
    pub client_features: Vec<f64>,
}

/// Median latency over repeated queries of one identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub identifier: String,
    pub client_features: Vec<f64>,
    pub latency: f64,
    pub predicted_label: usize,
    pub responses: Vec<ApiResponse>,
}

/// Queries every target `repetitions` times. Query `r` of target `i` uses the
/// noise seed of ordinal `ordinal_offset + i * repetitions + r`, so the result
/// does not depend on thread scheduling.
pub fn profile(
    service: &EnrichmentService,
    targets: &[Target],
    repetitions: usize,
    base_seed: u64,
    ordinal_offset: u64,
) -> Result<Vec<Profile>, AttackError> {
    if repetitions == 0 {
        return Err(AttackError::InvalidConfig("repetitions must be >= 1".into()));
    }
    targets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let seeds: Vec<u64> = (0..repetitions)
                .map(|r| query_seed(base_seed, ordinal_offset + (i * repetitions + r) as u64))
                .collect();
            let responses = service.query_repeated(&t.identifier, &t.client_features, &seeds)?;
            let latencies: Vec<f64> = responses.iter().map(|r| r.latency_cycles).collect();
            Ok(Profile {
                identifier: t.identifier.clone(),
                client_features: t.client_features.clone(),
                latency: median(&latencies),
                predicted_label: responses[0].predicted_label,
                responses,
            })
        })
        .collect()
}
