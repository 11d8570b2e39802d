//! End-to-end experiments: generate the benchmark, train a victim, serve it,
//! profile it, and measure what leaks.
//!
//! Every random choice is derived from one base seed through [`Seeds`].

use serde::{Deserialize, Serialize};

use crate::attack::{self, kmeans, AttackError, BaselineKind, FeatureSet, GbdtConfig, LeakageReport, Profile, Target};
use crate::datagen::{self, DataError, GenConfig, LabeledDataset, Split};
use crate::nn::{Example, Mlp, ModelSpec, NnError, TrainConfig};
use crate::seed::{self, stream};
use crate::service::{enrich, DefenseConfig, EnrichmentService, FeatureStore, Query, ServiceError};
use crate::timing::{TimingConfig, TimingError};
use crate::util::mean;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Per-purpose seeds derived from one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub base: u64,
    pub generate: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
    pub query: u64,
    pub kmeans: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            base,
            generate: seed::derive(base, stream::GEN_CLASS, u64::MAX),
            split: seed::derive(base, stream::SPLIT, 0),
            init: seed::derive(base, stream::VICTIM, 0),
            shuffle: seed::derive(base, stream::VICTIM, 1),
            query: seed::derive(base, stream::QUERY_NOISE, 0),
            kmeans: seed::derive(base, stream::KMEANS, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimConfig {
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 4,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 8,
        }
    }
}

impl VictimConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ModelSpec::new(self.width, self.depth, 1, 1)?;
        self.train_config(0).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub repetitions: usize,
    /// Number of k-means clusters; 0 means one per attribute class.
    pub clusters: usize,
    pub kmeans_max_iter: usize,
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub baseline: BaselineKind,
    pub features: FeatureSet,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let g = GbdtConfig::default();
        Self {
            repetitions: 101,
            clusters: 0,
            kmeans_max_iter: kmeans::DEFAULT_MAX_ITER,
            n_trees: g.n_trees,
            max_depth: g.max_depth,
            learning_rate: g.learning_rate,
            baseline: BaselineKind::Uniform,
            features: FeatureSet::Latency,
        }
    }
}

impl AttackConfig {
    pub fn gbdt(&self, seed: u64) -> GbdtConfig {
        GbdtConfig {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            learning_rate: self.learning_rate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::InvalidConfig("kmeans_max_iter must be >= 1".into()));
        }
        self.gbdt(0).validate()?;
        Ok(())
    }
}

/// Everything needed to run the benchmark from a base seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub gen: GenConfig,
    pub fractions: [f64; 3],
    pub victim: VictimConfig,
    pub timing: TimingConfig,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
}

impl Default for Benchmark {
    /// Five attribute classes, 80 rows each, half for the victim and a
    /// quarter each for the attacker's labeled and target sets.
    fn default() -> Self {
        Self {
            gen: GenConfig {
                k_sensitive: 5,
                n_client_features: 5,
                samples_per_class: 80,
                separation: 0.04,
                feature_noise: 0.01,
                task_classes: 2,
                seed: 0,
            },
            fractions: [0.5, 0.25, 0.25],
            victim: VictimConfig::default(),
            timing: benchmark_timing(),
            defense: DefenseConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

/// Default cost model scaled to four MACs per cycle, with the per-matrix
/// base cost scaled alike. Measurement noise stays at 500 cycles.
pub fn benchmark_timing() -> TimingConfig {
    let d = TimingConfig::default();
    TimingConfig {
        cycles_per_mac: d.cycles_per_mac / 4.0,
        cycles_skip_per_mac: d.cycles_skip_per_mac / 4.0,
        cycles_base_per_layer: d.cycles_base_per_layer / 4.0,
        ..d
    }
}

impl Benchmark {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.victim.validate()?;
        self.timing.validate()?;
        self.defense.validate()?;
        self.attack.validate()
    }

    /// Generates and splits the dataset.
    pub fn dataset(&self, seeds: &Seeds) -> Result<LabeledDataset> {
        let gen = GenConfig {
            seed: seeds.generate,
            ..self.gen
        };
        let ds = datagen::generate(&gen)?;
        Ok(datagen::split(&ds, self.fractions, seeds.split)?)
    }

    pub fn model_spec(&self, dataset: &LabeledDataset) -> Result<ModelSpec> {
        Ok(ModelSpec::new(
            self.victim.width,
            self.victim.depth,
            dataset.n_features() + dataset.k_sensitive,
            dataset.task_classes().max(2),
        )?)
    }
}

/// A trained victim with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Victim {
    pub model: Mlp,
    /// Percent of train rows classified correctly.
    pub train_accuracy: f64,
    /// Mean activation sparsity over train rows of each attribute class.
    pub class_sparsity: Vec<f64>,
}

fn victim_examples(dataset: &LabeledDataset) -> Result<(Vec<Example>, Vec<usize>)> {
    let mut examples = Vec::new();
    let mut attrs = Vec::new();
    for r in dataset.rows_in(Split::Train) {
        examples.push(Example {
            input: enrich(&r.features, r.attribute, dataset.k_sensitive)?,
            label: r.task_label,
        });
        attrs.push(r.attribute);
    }
    Ok((examples, attrs))
}

pub fn train_victim(dataset: &LabeledDataset, spec: ModelSpec, cfg: &VictimConfig, seeds: &Seeds) -> Result<Victim> {
    let (examples, attrs) = victim_examples(dataset)?;
    let mut model = Mlp::build(spec, seeds.init)?;
    model.train(&examples, &cfg.train_config(seeds.shuffle))?;
    describe_victim(model, &examples, &attrs, dataset.k_sensitive)
}

fn describe_victim(model: Mlp, examples: &[Example], attrs: &[usize], k: usize) -> Result<Victim> {
    let mut hits = 0usize;
    let mut per_class = vec![Vec::new(); k];
    for (ex, &a) in examples.iter().zip(attrs) {
        let fwd = model.forward(&ex.input)?;
        if crate::util::argmax(&fwd.logits) == ex.label {
            hits += 1;
        }
        per_class[a].push(fwd.stats.total_sparsity());
    }
    let train_accuracy = 100.0 * hits as f64 / examples.len().max(1) as f64;
    let class_sparsity = per_class
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { mean(v) })
        .collect();
    Ok(Victim {
        model,
        train_accuracy,
        class_sparsity,
    })
}

/// Recomputes diagnostics for an already trained model.
pub fn assess_victim(dataset: &LabeledDataset, model: Mlp) -> Result<Victim> {
    let (examples, attrs) = victim_examples(dataset)?;
    describe_victim(model, &examples, &attrs, dataset.k_sensitive)
}

/// Serves `model` with every dataset identifier registered.
pub fn build_service(
    dataset: &LabeledDataset,
    model: Mlp,
    timing: TimingConfig,
    defense: DefenseConfig,
) -> Result<EnrichmentService> {
    let mut store = FeatureStore::new(dataset.k_sensitive);
    for r in &dataset.rows {
        store.register(r.identifier.clone(), r.attribute)?;
    }
    Ok(EnrichmentService::new(model, timing, defense, store)?)
}

/// Outcome of one profiling-and-inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub report: LeakageReport,
    /// Test accuracy of anchored 1-D k-means, or `None` when the medians
    /// have fewer distinct values than clusters.
    pub cluster_accuracy: Option<f64>,
    pub aux: Vec<Profile>,
    pub aux_attributes: Vec<usize>,
    pub test: Vec<Profile>,
    pub test_attributes: Vec<usize>,
    pub test_predictions: Vec<usize>,
}

impl AttackRun {
    fn responses(&self) -> impl Iterator<Item = &crate::service::ApiResponse> {
        self.aux.iter().chain(&self.test).flat_map(|p| &p.responses)
    }

    /// Fraction of all issued queries that overran the padding budget.
    pub fn violation_rate(&self) -> f64 {
        let (n, v) = self
            .responses()
            .fold((0usize, 0usize), |(n, v), r| (n + 1, v + usize::from(r.budget_violation)));
        v as f64 / n.max(1) as f64
    }

    /// Mean observed latency over all issued queries.
    pub fn mean_latency(&self) -> f64 {
        let l: Vec<f64> = self.responses().map(|r| r.latency_cycles).collect();
        mean(&l)
    }

    /// One query per profiled identifier, with noise seed 0.
    pub fn identities(&self) -> Vec<Query> {
        self.aux
            .iter()
            .chain(&self.test)
            .map(|p| Query {
                identifier: p.identifier.clone(),
                client_features: p.client_features.clone(),
                noise_seed: 0,
            })
            .collect()
    }

    /// Every issued query, in issue order, with its noise seed. `repetitions`
    /// and `query_seed` must be those the run used.
    pub fn queries(&self, repetitions: usize, query_seed: u64) -> Vec<Query> {
        self.aux
            .iter()
            .chain(&self.test)
            .enumerate()
            .flat_map(|(i, p)| {
                (0..repetitions).map(move |r| Query {
                    identifier: p.identifier.clone(),
                    client_features: p.client_features.clone(),
                    noise_seed: crate::service::query_seed(query_seed, (i * repetitions + r) as u64),
                })
            })
            .collect()
    }
}

fn targets(dataset: &LabeledDataset, split: Split) -> (Vec<Target>, Vec<usize>) {
    dataset
        .rows_in(split)
        .map(|r| {
            (
                Target {
                    identifier: r.identifier.clone(),
                    client_features: r.features.clone(),
                },
                r.attribute,
            )
        })
        .unzip()
}

/// Profiles the auxiliary and test identifiers, trains the GBDT and the
/// anchored clustering on the auxiliary profiles, and scores both on the
/// test profiles.
pub fn run_attack(service: &EnrichmentService, dataset: &LabeledDataset, cfg: &AttackConfig, seeds: &Seeds) -> Result<AttackRun> {
    cfg.validate()?;
    let k = dataset.k_sensitive;
    let n_labels = service.model().spec().num_classes;
    let (aux_targets, aux_attributes) = targets(dataset, Split::Aux);
    let (test_targets, test_attributes) = targets(dataset, Split::Test);
    let reps = cfg.repetitions;
    let aux = attack::profile(service, &aux_targets, reps, seeds.query, 0)?;
    let test = attack::profile(service, &test_targets, reps, seeds.query, (aux_targets.len() * reps) as u64)?;

    let rows: Vec<Vec<f64>> = aux.iter().map(|p| cfg.features.encode(p, n_labels)).collect();
    let model = attack::gbdt::train(&rows, &aux_attributes, k, &cfg.gbdt(seeds.base))?;
    let test_predictions = test
        .iter()
        .map(|p| model.predict(&cfg.features.encode(p, n_labels)))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut groups = vec![Vec::new(); k];
    for (p, &a) in aux.iter().zip(&aux_attributes).chain(test.iter().zip(&test_attributes)) {
        groups[a].push(p.latency);
    }
    let report = LeakageReport::build(&test_predictions, &test_attributes, k, cfg.baseline, &groups)?;

    let n_clusters = if cfg.clusters == 0 { k } else { cfg.clusters };
    let medians: Vec<f64> = aux.iter().chain(&test).map(|p| p.latency).collect();
    let cluster_accuracy = match kmeans::cluster(&medians, n_clusters, seeds.kmeans, cfg.kmeans_max_iter) {
        Ok(c) => {
            let labeled: Vec<(f64, usize)> = aux.iter().map(|p| p.latency).zip(aux_attributes.iter().copied()).collect();
            let anchored = c.anchor(&labeled);
            let hits = test
                .iter()
                .zip(&test_attributes)
                .filter(|(p, &a)| anchored.infer(p.latency) == Ok(a))
                .count();
            Some(100.0 * hits as f64 / test.len().max(1) as f64)
        }
        Err(AttackError::TooFewDistinctPoints { .. }) => None,
        Err(e) => return Err(e.into()),
    };

    Ok(AttackRun {
        report,
        cluster_accuracy,
        aux,
        aux_attributes,
        test,
        test_attributes,
        test_predictions,
    })
}

/// Latency histogram of every issued query, split by true attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_centers: Vec<f64>,
    /// `counts[bin][class]`
    pub counts: Vec<Vec<usize>>,
}

impl Histogram {
    /// Equal-width bins spanning the observed range. A zero-width range
    /// collapses to a single bin.
    pub fn of_run(run: &AttackRun, k: usize, bins: usize) -> Self {
        let samples: Vec<(f64, usize)> = run
            .aux
            .iter()
            .zip(&run.aux_attributes)
            .chain(run.test.iter().zip(&run.test_attributes))
            .flat_map(|(p, &a)| p.responses.iter().map(move |r| (r.latency_cycles, a)))
            .collect();
        let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let bins = if samples.is_empty() || hi <= lo { 1 } else { bins.max(1) };
        let width = if bins == 1 { 0.0 } else { (hi - lo) / bins as f64 };
        let mut counts = vec![vec![0usize; k]; bins];
        for (x, a) in samples {
            let b = if width == 0.0 {
                0
            } else {
                (((x - lo) / width) as usize).min(bins - 1)
            };
            counts[b][a] += 1;
        }
        let bin_centers = (0..bins)
            .map(|b| if width == 0.0 { lo } else { lo + (b as f64 + 0.5) * width })
            .collect();
        Self { bin_centers, counts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Padding,
    Dense,
    ConfidenceMask,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] = [Self::None, Self::Padding, Self::Dense, Self::ConfidenceMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Padding => "padding",
            Self::Dense => "dense",
            Self::ConfidenceMask => "confidence_mask",
        }
    }
}

/// Padding budget used by the defense sweep: dense worst case plus a noise
/// margin of `sigmas` standard deviations.
pub fn padding_budget(service: &EnrichmentService, sigmas: f64) -> f64 {
    service.worst_case_cycles() + sigmas * service.timing().noise_sigma
}

pub const PADDING_MARGIN_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseRow {
    pub defense: DefenseKind,
    pub accuracy: f64,
    pub advantage_pp: f64,
    /// Extra latency relative to the undefended service. For padding this
    /// is `(budget − mean) / mean`; otherwise `inflation − 1`.
    pub overhead_fraction: f64,
    /// Mean energy per query relative to the undefended service.
    pub energy_ratio: f64,
    /// Mean observed latency relative to the undefended service.
    pub latency_inflation: f64,
    pub violation_rate: f64,
    pub budget_cycles: Option<f64>,
}

/// Runs the same attack against each defense with identical seeds.
pub fn defend_eval(
    dataset: &LabeledDataset,
    undefended: &EnrichmentService,
    cfg: &AttackConfig,
    seeds: &Seeds,
) -> Result<Vec<(DefenseRow, AttackRun)>> {
    let plain = undefended.with_defense(DefenseConfig::default())?;
    let base_run = run_attack(&plain, dataset, cfg, seeds)?;
    // Energy is noise-free, so one query per identifier suffices.
    let energy_queries = base_run.identities();
    let base_latency = base_run.mean_latency();
    let base_energy = plain.energy_report(&energy_queries)?.mean_energy_as_is;

    let mut out = Vec::new();
    for kind in DefenseKind::ALL {
        let defense = match kind {
            DefenseKind::None => DefenseConfig::default(),
            DefenseKind::Padding => DefenseConfig {
                padding_budget_cycles: Some(padding_budget(&plain, PADDING_MARGIN_SIGMAS)),
                ..DefenseConfig::default()
            },
            DefenseKind::Dense => DefenseConfig {
                disable_zero_skip: true,
                ..DefenseConfig::default()
            },
            DefenseKind::ConfidenceMask => DefenseConfig {
                mask_confidences: true,
                ..DefenseConfig::default()
            },
        };
        let service = plain.with_defense(defense)?;
        let run = if kind == DefenseKind::None {
            base_run.clone()
        } else {
            run_attack(&service, dataset, cfg, seeds)?
        };
        let inflation = run.mean_latency() / base_latency;
        // `base_run` saw the same noise seeds undefended, so its mean latency
        // is what `EnrichmentService::defense_overhead` would replay.
        let overhead_fraction = match defense.padding_budget_cycles {
            Some(budget) => crate::service::padding_overhead(budget, base_latency),
            None => inflation - 1.0,
        };
        let row = DefenseRow {
            defense: kind,
            accuracy: run.report.accuracy,
            advantage_pp: run.report.advantage_pp,
            overhead_fraction,
            energy_ratio: service.energy_report(&energy_queries)?.mean_energy_as_is / base_energy,
            latency_inflation: inflation,
            violation_rate: run.violation_rate(),
            budget_cycles: defense.padding_budget_cycles,
        };
        out.push((row, run));
    }
    Ok(out)
}

/// `(width, depth)` points of the scaling study: widths at depth 4, then
/// depths at width 128.
pub fn scaling_points() -> Vec<(usize, usize)> {
    let mut pts: Vec<(usize, usize)> = [8, 16, 32, 64, 128, 256, 512].iter().map(|&w| (w, 4)).collect();
    pts.extend([2, 3, 5, 6, 7].iter().map(|&d| (128, d)));
    pts.sort_by_key(|&(w, d)| (d != 4, w, d));
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub width: usize,
    pub depth: usize,
    /// Counts under the reference table's layer convention.
    pub params: u64,
    pub activations: u64,
    pub mean_abs_d: f64,
    pub accuracy: f64,
}

/// Trains and attacks one victim size on an already split dataset.
pub fn scaling_row(bench: &Benchmark, dataset: &LabeledDataset, width: usize, depth: usize, seeds: &Seeds) -> Result<ScalingRow> {
    let victim_cfg = VictimConfig {
        width,
        depth,
        ..bench.victim
    };
    let sized = Benchmark {
        victim: victim_cfg,
        ..*bench
    };
    let victim = train_victim(dataset, sized.model_spec(dataset)?, &victim_cfg, seeds)?;
    let service = build_service(dataset, victim.model, bench.timing, bench.defense)?;
    let run = run_attack(&service, dataset, &bench.attack, seeds)?;
    let table = ModelSpec::table_convention(width, depth);
    Ok(ScalingRow {
        width,
        depth,
        params: table.param_count(),
        activations: table.activation_count(),
        mean_abs_d: run.report.mean_abs_d,
        accuracy: run.report.accuracy,
    })
}

/// Full pipeline for one base seed under `bench.defense`.
pub fn run_benchmark(bench: &Benchmark, base_seed: u64) -> Result<(Victim, AttackRun)> {
    bench.validate()?;
    let seeds = Seeds::from_base(base_seed);
    let dataset = bench.dataset(&seeds)?;
    let victim = train_victim(&dataset, bench.model_spec(&dataset)?, &bench.victim, &seeds)?;
    let service = build_service(&dataset, victim.model.clone(), bench.timing, bench.defense)?;
    let run = run_attack(&service, &dataset, &bench.attack, &seeds)?;
    Ok((victim, run))
}

/// Mean of `f` over the runs of several base seeds.
pub fn seed_mean<F>(seeds: &[u64], mut f: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<f64>,
{
    let vals = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(mean(&vals))
}
