//! Label-only inference API with backend attribute enrichment.
//!
//! A query names an identifier and supplies non-sensitive client features.
//! The service looks the identifier up in its [`FeatureStore`], appends the
//! one-hot encoded sensitive attribute, runs the victim through the cost
//! model, applies the active [`DefenseConfig`], and answers with the predicted
//! label and the observed latency only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::nn::{Mlp, NnError};
use crate::seed;
use crate::timing::{self, TimingConfig, TimingError};
use crate::util::{argmax, mean};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ServiceError {
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("attribute {attribute} out of range for {k_sensitive} classes")]
    AttributeOutOfRange { attribute: usize, k_sensitive: usize },
    #[error("dimension mismatch: expected {expected} client features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("padding defense is not active")]
    PaddingInactive,
    #[error("invalid service config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error("i/o failure on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// The noise-free part of answering a query.
struct Evaluation {
    attribute: usize,
    predicted_label: usize,
    cycles_true: f64,
    energy_nj: f64,
    total_sparsity: f64,
}

impl Evaluation {
    fn respond(&self, cfg: &TimingConfig, defense: &DefenseConfig, noise_seed: u64) -> QueryTrace {
        let cycles_observed = timing::observe(self.cycles_true, cfg, noise_seed);
        let (latency_cycles, budget_violation) = match defense.padding_budget_cycles {
            Some(budget) => (cycles_observed.max(budget), cycles_observed > budget),
            None => (cycles_observed, false),
        };
        QueryTrace {
            response: ApiResponse {
                predicted_label: self.predicted_label,
                latency_cycles,
                budget_violation,
            },
            attribute: self.attribute,
            cycles_true: self.cycles_true,
            cycles_observed,
            energy_nj: self.energy_nj,
            total_sparsity: self.total_sparsity,
        }
    }
}

/// Identifier → sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    k_sensitive: usize,
    entries: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn new(k_sensitive: usize) -> Self {
        Self {
            k_sensitive,
            entries: BTreeMap::new(),
        }
    }

    pub fn k_sensitive(&self) -> usize {
        self.k_sensitive
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-registering an identifier overwrites its attribute.
    pub fn register(&mut self, id: impl Into<String>, attribute: usize) -> Result<()> {
        if attribute >= self.k_sensitive {
            return Err(ServiceError::AttributeOutOfRange {
                attribute,
                k_sensitive: self.k_sensitive,
            });
        }
        self.entries.insert(id.into(), attribute);
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.entries
            .get(id)
            .copied()
            .ok_or_else(|| ServiceError::UnknownIdentifier(id.to_owned()))
    }
}

/// `client_features ++ one_hot(attribute, k_sensitive)`.
pub fn enrich(client_features: &[f64], attribute: usize, k_sensitive: usize) -> Result<Vec<f64>> {
    if attribute >= k_sensitive {
        return Err(ServiceError::AttributeOutOfRange { attribute, k_sensitive });
    }
    let mut x = Vec::with_capacity(client_features.len() + k_sensitive);
    x.extend_from_slice(client_features);
    x.extend((0..k_sensitive).map(|c| if c == attribute { 1.0 } else { 0.0 }));
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DefenseConfig {
    /// Respond no earlier than this many cycles after arrival.
    pub padding_budget_cycles: Option<f64>,
    /// Run the accelerator with zero-skipping off.
    pub disable_zero_skip: bool,
    /// Strip confidences from responses. The API is label-only already, so
    /// this changes nothing observable.
    pub mask_confidences: bool,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.padding_budget_cycles {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(ServiceError::InvalidConfig("padding budget must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Everything the caller learns from one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApiResponse {
    pub predicted_label: usize,
    pub latency_cycles: f64,
    pub budget_violation: bool,
}

/// Server-side view of one query, for evaluation only. Never returned
/// through [`EnrichmentService::query`].
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub response: ApiResponse,
    pub attribute: usize,
    pub cycles_true: f64,
    pub cycles_observed: f64,
    pub energy_nj: f64,
    pub total_sparsity: f64,
}

/// One evaluation query.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub identifier: String,
    pub client_features: Vec<f64>,
    pub noise_seed: u64,
}

/// Noise seed of the `ordinal`-th query under `base_seed`.
pub fn query_seed(base_seed: u64, ordinal: u64) -> u64 {
    seed::derive(base_seed, seed::stream::QUERY_NOISE, ordinal)
}

/// `(budget − mean_latency) / mean_latency`.
pub fn padding_overhead(budget: f64, mean_latency: f64) -> f64 {
    (budget - mean_latency) / mean_latency
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub mean_energy_as_is: f64,
    pub mean_energy_dense: f64,
    /// `mean_energy_dense / mean_energy_as_is`.
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct EnrichmentService {
    model: Mlp,
    timing: TimingConfig,
    defense: DefenseConfig,
    store: FeatureStore,
}

impl EnrichmentService {
    pub fn new(model: Mlp, timing: TimingConfig, defense: DefenseConfig, store: FeatureStore) -> Result<Self> {
        timing.validate()?;
        defense.validate()?;
        if model.spec().input_dim <= store.k_sensitive() {
            return Err(ServiceError::InvalidConfig(format!(
                "model input_dim {} leaves no room for client features next to {} attribute slots",
                model.spec().input_dim,
                store.k_sensitive()
            )));
        }
        Ok(Self {
            model,
            timing,
            defense,
            store,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn timing(&self) -> &TimingConfig {
        &self.timing
    }

    pub fn defense(&self) -> &DefenseConfig {
        &self.defense
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    /// Registration needs exclusive access, so it cannot interleave with serving.
    pub fn register(&mut self, id: impl Into<String>, attribute: usize) -> Result<()> {
        self.store.register(id, attribute)
    }

    /// Same victim and store under a different defense.
    pub fn with_defense(&self, defense: DefenseConfig) -> Result<Self> {
        defense.validate()?;
        Ok(Self {
            defense,
            ..self.clone()
        })
    }

    pub fn client_dim(&self) -> usize {
        self.model.spec().input_dim - self.store.k_sensitive()
    }

    /// Timing parameters actually in force, after the zero-skip defense.
    pub fn effective_timing(&self) -> TimingConfig {
        if self.defense.disable_zero_skip {
            self.timing.dense()
        } else {
            self.timing
        }
    }

    pub fn worst_case_cycles(&self) -> f64 {
        timing::worst_case_cycles(self.model.spec(), &self.timing)
    }

    pub fn query(&self, id: &str, client_features: &[f64], noise_seed: u64) -> Result<ApiResponse> {
        Ok(self.query_traced(id, client_features, noise_seed)?.response)
    }

    pub fn query_traced(&self, id: &str, client_features: &[f64], noise_seed: u64) -> Result<QueryTrace> {
        Ok(self.evaluate(id, client_features)?.respond(&self.effective_timing(), &self.defense, noise_seed))
    }

    /// Answers `noise_seeds.len()` queries for the same identifier and
    /// features with one forward pass; element `i` equals
    /// `query(id, client_features, noise_seeds[i])`.
    pub fn query_repeated(&self, id: &str, client_features: &[f64], noise_seeds: &[u64]) -> Result<Vec<ApiResponse>> {
        let eval = self.evaluate(id, client_features)?;
        let cfg = self.effective_timing();
        Ok(noise_seeds
            .iter()
            .map(|&s| eval.respond(&cfg, &self.defense, s).response)
            .collect())
    }

    fn evaluate(&self, id: &str, client_features: &[f64]) -> Result<Evaluation> {
        let attribute = self.store.lookup(id)?;
        if client_features.len() != self.client_dim() {
            return Err(ServiceError::DimensionMismatch {
                expected: self.client_dim(),
                got: client_features.len(),
            });
        }
        let x = enrich(client_features, attribute, self.store.k_sensitive())?;
        let fwd = self.model.forward(&x)?;
        let cfg = self.effective_timing();
        let spec = self.model.spec();
        Ok(Evaluation {
            attribute,
            predicted_label: argmax(&fwd.logits),
            cycles_true: timing::cost(&fwd.stats, spec, &cfg)?,
            energy_nj: timing::energy(&fwd.stats, spec, &cfg)?,
            total_sparsity: fwd.stats.total_sparsity(),
        })
    }

    /// Relative latency cost of the padding budget over the undefended
    /// service, replayed with the same noise seeds.
    pub fn defense_overhead(&self, queries: &[Query]) -> Result<f64> {
        let budget = self.defense.padding_budget_cycles.ok_or(ServiceError::PaddingInactive)?;
        if queries.is_empty() {
            return Err(ServiceError::EmptyEvaluationSet);
        }
        let baseline = self.with_defense(DefenseConfig::default())?;
        let latencies = queries
            .iter()
            .map(|q| Ok(baseline.query(&q.identifier, &q.client_features, q.noise_seed)?.latency_cycles))
            .collect::<Result<Vec<f64>>>()?;
        Ok(padding_overhead(budget, mean(&latencies)))
    }

    /// Mean energy per query as served, and as if every MAC were executed
    /// on a nonzero operand.
    pub fn energy_report(&self, queries: &[Query]) -> Result<EnergyReport> {
        if queries.is_empty() {
            return Err(ServiceError::EmptyEvaluationSet);
        }
        let spec = self.model.spec();
        let as_is_cfg = self.effective_timing();
        let dense_cfg = self.timing.dense();
        let mut as_is = Vec::with_capacity(queries.len());
        let mut dense = Vec::with_capacity(queries.len());
        for q in queries {
            let attribute = self.store.lookup(&q.identifier)?;
            let x = enrich(&q.client_features, attribute, self.store.k_sensitive())?;
            let stats = self.model.forward(&x)?.stats;
            as_is.push(timing::energy(&stats, spec, &as_is_cfg)?);
            dense.push(timing::energy(&stats, spec, &dense_cfg)?);
        }
        let (a, d) = (mean(&as_is), mean(&dense));
        Ok(EnergyReport {
            mean_energy_as_is: a,
            mean_energy_dense: d,
            ratio: d / a,
        })
    }
}

/// Whether the trace file carries the ground-truth attribute column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// Ground truth written, for evaluation.
    Oracle,
    /// Ground-truth column left empty.
    Attack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub query_id: u64,
    pub identifier: String,
    pub latency_cycles: f64,
    pub predicted_label: usize,
    pub attribute: Option<usize>,
    pub client_features: Vec<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Writes `query_id,identifier,latency_cycles,predicted_label,attribute_ground_truth,f0,...`.
pub fn write_traces(path: &Path, rows: &[TraceRow], mode: TraceMode) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let n = rows.first().map_or(0, |r| r.client_features.len());
    let mut header: Vec<String> = [
        "query_id",
        "identifier",
        "latency_cycles",
        "predicted_label",
        "attribute_ground_truth",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..n).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for r in rows {
        let truth = match (mode, r.attribute) {
            (TraceMode::Oracle, Some(a)) => a.to_string(),
            _ => String::new(),
        };
        let mut rec = vec![
            r.query_id.to_string(),
            r.identifier.clone(),
            format!("{:?}", r.latency_cycles),
            r.predicted_label.to_string(),
            truth,
        ];
        rec.extend(r.client_features.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| io_err(path, format!("line {line}: bad {what}"));
        if rec.len() < 5 {
            return Err(bad("column count"));
        }
        rows.push(TraceRow {
            query_id: rec[0].parse().map_err(|_| bad("query_id"))?,
            identifier: rec[1].to_owned(),
            latency_cycles: rec[2].parse().map_err(|_| bad("latency_cycles"))?,
            predicted_label: rec[3].parse().map_err(|_| bad("predicted_label"))?,
            attribute: if rec[4].is_empty() {
                None
            } else {
                Some(rec[4].parse().map_err(|_| bad("attribute_ground_truth"))?)
            },
            client_features: (5..rec.len())
                .map(|i| rec[i].parse().map_err(|_| bad("feature")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn service(defense: DefenseConfig, noise_sigma: f64) -> EnrichmentService {
        let spec = ModelSpec::new(16, 2, 5, 2).unwrap();
        let model = Mlp::build(spec, 3).unwrap();
        let mut store = FeatureStore::new(3);
        for (i, a) in [0, 1, 2, 1].into_iter().enumerate() {
            store.register(format!("p{i}"), a).unwrap();
        }
        let timing = TimingConfig {
            noise_sigma,
            ..TimingConfig::default()
        };
        EnrichmentService::new(model, timing, defense, store).unwrap()
    }

    #[test]
    fn store_register_and_lookup() {
        let mut s = FeatureStore::new(4);
        s.register("p1", 3).unwrap();
        assert_eq!(s.lookup("p1").unwrap(), 3);
        s.register("p1", 1).unwrap();
        assert_eq!(s.lookup("p1").unwrap(), 1);
        assert_eq!(
            s.register("p2", 4),
            Err(ServiceError::AttributeOutOfRange {
                attribute: 4,
                k_sensitive: 4
            })
        );
        assert_eq!(s.lookup("nobody"), Err(ServiceError::UnknownIdentifier("nobody".into())));
    }

    #[test]
    fn enrich_appends_one_hot() {
        assert_eq!(enrich(&[0.5], 1, 3).unwrap(), vec![0.5, 0.0, 1.0, 0.0]);
        assert_eq!(enrich(&[2.0, 3.0], 0, 1).unwrap(), vec![2.0, 3.0, 1.0]);
        assert_eq!(enrich(&[], 1, 2).unwrap(), vec![0.0, 1.0]);
        assert!(enrich(&[1.0], 2, 2).is_err());
    }

    #[test]
    fn query_errors() {
        let svc = service(DefenseConfig::default(), 0.0);
        assert_eq!(
            svc.query("ghost", &[0.0, 0.0], 0),
            Err(ServiceError::UnknownIdentifier("ghost".into()))
        );
        assert_eq!(
            svc.query("p0", &[0.0], 0),
            Err(ServiceError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn worst_case_padding_flattens_latency() {
        let probe = service(DefenseConfig::default(), 0.0);
        let budget = probe.worst_case_cycles();
        let svc = probe
            .with_defense(DefenseConfig {
                padding_budget_cycles: Some(budget),
                ..Default::default()
            })
            .unwrap();
        for i in 0..4 {
            let r = svc.query(&format!("p{i}"), &[0.3, -0.2], i).unwrap();
            assert_eq!(r.latency_cycles, budget);
            assert!(!r.budget_violation);
        }
    }

    #[test]
    fn budget_violation_reports_true_latency() {
        let svc = service(
            DefenseConfig {
                padding_budget_cycles: Some(10.0),
                ..Default::default()
            },
            0.0,
        );
        let t = svc.query_traced("p0", &[0.3, -0.2], 0).unwrap();
        assert!(t.response.budget_violation);
        assert_eq!(t.response.latency_cycles, t.cycles_true);
    }

    #[test]
    fn dense_mode_is_attribute_blind() {
        let svc = service(
            DefenseConfig {
                disable_zero_skip: true,
                ..Default::default()
            },
            0.0,
        );
        let lat: Vec<f64> = (0..4)
            .map(|i| svc.query(&format!("p{i}"), &[0.3, -0.2], 0).unwrap().latency_cycles)
            .collect();
        assert!(lat.iter().all(|&l| l == lat[0]));
        assert_eq!(lat[0], svc.worst_case_cycles());
    }

    #[test]
    fn distinct_attributes_give_distinct_latencies_when_sparsity_differs() {
        let svc = service(DefenseConfig::default(), 0.0);
        let feats = [0.3, -0.2];
        let spec = *svc.model().spec();
        let expected: Vec<f64> = (0..3)
            .map(|a| {
                let x = enrich(&feats, a, 3).unwrap();
                timing::cost(&svc.model().forward(&x).unwrap().stats, &spec, svc.timing()).unwrap()
            })
            .collect();
        let observed: Vec<f64> = ["p0", "p1", "p2"]
            .iter()
            .map(|id| svc.query(id, &feats, 0).unwrap().latency_cycles)
            .collect();
        assert_eq!(observed, expected);
        assert!(expected[0] != expected[1] || expected[1] != expected[2]);
    }

    #[test]
    fn response_serializes_without_private_fields() {
        let svc = service(DefenseConfig::default(), 100.0);
        let r = svc.query("p2", &[0.1, 0.1], 9).unwrap();
        let v = serde_json::to_value(r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["budget_violation", "latency_cycles", "predicted_label"]);
    }

    #[test]
    fn overhead_formula() {
        assert!((padding_overhead(10_000.0, 9_300.0) - 0.075_268_817_204_301_08).abs() < 1e-12);
        assert_eq!(padding_overhead(500.0, 500.0), 0.0);
        let svc = service(DefenseConfig::default(), 0.0);
        assert_eq!(svc.defense_overhead(&[]), Err(ServiceError::PaddingInactive));
        let padded = svc
            .with_defense(DefenseConfig {
                padding_budget_cycles: Some(1.0),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(padded.defense_overhead(&[]), Err(ServiceError::EmptyEvaluationSet));
        assert_eq!(svc.energy_report(&[]), Err(ServiceError::EmptyEvaluationSet));
    }

    #[test]
    fn trace_csv_hides_ground_truth_in_attack_mode() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![TraceRow {
            query_id: 0,
            identifier: "p0".into(),
            latency_cycles: 1234.5,
            predicted_label: 1,
            attribute: Some(2),
            client_features: vec![0.25, -1.0],
        }];
        let oracle = dir.path().join("o.csv");
        let attack = dir.path().join("a.csv");
        write_traces(&oracle, &rows, TraceMode::Oracle).unwrap();
        write_traces(&attack, &rows, TraceMode::Attack).unwrap();
        let text = std::fs::read_to_string(&attack).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "query_id,identifier,latency_cycles,predicted_label,attribute_ground_truth,f0,f1"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "0,p0,1234.5,1,,0.25,-1.0");
        assert_eq!(read_traces(&oracle).unwrap(), rows);
        assert_eq!(read_traces(&attack).unwrap()[0].attribute, None);
    }
}
