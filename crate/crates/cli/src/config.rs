//! Experiment config file: sectioned TOML with scalar values only.
//!
//! ```toml
//! base_seed = 0
//!
//! [gen]
//! k_sensitive = 5
//! n_client_features = 5
//! samples_per_class = 80
//! separation = 0.04
//! feature_noise = 0.01
//! task_classes = 2
//! split_train = 0.5
//! split_aux = 0.25
//! split_test = 0.25
//!
//! [model]
//! width = 128
//! depth = 4
//! learning_rate = 0.05
//! epochs = 30
//! batch_size = 8
//!
//! [timing]
//! mode = "element"          # element | tile | dense
//! tile_rows = 4             # used by mode = "tile"
//! cycles_per_mac = 0.25
//! cycles_skip_per_mac = 0.0
//! cycles_base_per_layer = 250.0
//! noise_sigma = 500.0
//! energy_nonzero_per_op = 15.0
//! energy_zero_per_op = 12.0
//!
//! [defense]
//! padding_budget_cycles = 20000.0   # omit to disable padding
//! disable_zero_skip = false
//! mask_confidences = false
//!
//! [attack]
//! repetitions = 101
//! clusters = 0              # 0: one per attribute class
//! kmeans_max_iter = 100
//! n_trees = 100
//! max_depth = 3
//! learning_rate = 0.1
//! baseline = "uniform"      # uniform | empirical_prior
//! features = "latency"      # latency | latency_label | full
//! histogram_bins = 50
//!
//! [paths]                   # relative paths resolve against --out
//! dataset = "dataset.csv"
//! model = "model.txt"
//! traces = "traces.csv"
//! reports = "reports"
//! ```
//!
//! Every key is optional and defaults to the benchmark value shown.

use std::path::{Path, PathBuf};

use leaklab::attack::{BaselineKind, FeatureSet};
use leaklab::datagen::GenConfig;
use leaklab::experiment::{AttackConfig, Benchmark, VictimConfig};
use leaklab::service::DefenseConfig;
use leaklab::timing::{SkipMode, TimingConfig};
use serde::Deserialize;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub k_sensitive: usize,
    pub n_client_features: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub feature_noise: f64,
    pub task_classes: usize,
    pub split_train: f64,
    pub split_aux: f64,
    pub split_test: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let b = Benchmark::default();
        Self {
            k_sensitive: b.gen.k_sensitive,
            n_client_features: b.gen.n_client_features,
            samples_per_class: b.gen.samples_per_class,
            separation: b.gen.separation,
            feature_noise: b.gen.feature_noise,
            task_classes: b.gen.task_classes,
            split_train: b.fractions[0],
            split_aux: b.fractions[1],
            split_test: b.fractions[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Element,
    Tile,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub mode: ModeName,
    pub tile_rows: usize,
    pub cycles_per_mac: f64,
    pub cycles_skip_per_mac: f64,
    pub cycles_base_per_layer: f64,
    pub noise_sigma: f64,
    pub energy_nonzero_per_op: f64,
    pub energy_zero_per_op: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        let t = Benchmark::default().timing;
        Self {
            mode: ModeName::Element,
            tile_rows: 4,
            cycles_per_mac: t.cycles_per_mac,
            cycles_skip_per_mac: t.cycles_skip_per_mac,
            cycles_base_per_layer: t.cycles_base_per_layer,
            noise_sigma: t.noise_sigma,
            energy_nonzero_per_op: t.energy_nonzero_per_op,
            energy_zero_per_op: t.energy_zero_per_op,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub padding_budget_cycles: Option<f64>,
    pub disable_zero_skip: bool,
    pub mask_confidences: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub repetitions: usize,
    pub clusters: usize,
    pub kmeans_max_iter: usize,
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub baseline: BaselineKind,
    pub features: FeatureSet,
    pub histogram_bins: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            repetitions: a.repetitions,
            clusters: a.clusters,
            kmeans_max_iter: a.kmeans_max_iter,
            n_trees: a.n_trees,
            max_depth: a.max_depth,
            learning_rate: a.learning_rate,
            baseline: a.baseline,
            features: a.features,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub traces: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "dataset.csv".into(),
            model: "model.txt".into(),
            traces: "traces.csv".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsSection {
    /// Resolves relative entries against `out`.
    pub fn resolve(&self, out: &Path) -> Self {
        let r = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { out.join(p) };
        Self {
            dataset: r(&self.dataset),
            model: r(&self.model),
            traces: r(&self.traces),
            reports: r(&self.reports),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    pub gen: GenSection,
    pub model: VictimConfig,
    pub timing: TimingSection,
    pub defense: DefenseSection,
    pub attack: AttackSection,
    pub paths: PathsSection,
}

fn invalid(key: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: e.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: one_line(&e.to_string()),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: format!("{}: {}", e.path(), one_line(&e.inner().to_string())),
        })?;
        cfg.benchmark()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Converts to the library's benchmark description, validating each
    /// section under its own key.
    pub fn benchmark(&self) -> Result<Benchmark, ConfigError> {
        let g = &self.gen;
        let gen = GenConfig {
            k_sensitive: g.k_sensitive,
            n_client_features: g.n_client_features,
            samples_per_class: g.samples_per_class,
            separation: g.separation,
            feature_noise: g.feature_noise,
            task_classes: g.task_classes,
            seed: 0,
        };
        gen.validate().map_err(|e| invalid("gen", e))?;
        let fractions = [g.split_train, g.split_aux, g.split_test];
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("gen.split_*", "fractions must be positive and sum to 1"));
        }

        self.model.validate().map_err(|e| invalid("model", e))?;

        let t = &self.timing;
        if t.mode == ModeName::Tile && t.tile_rows == 0 {
            return Err(invalid("timing.tile_rows", "must be >= 1"));
        }
        let timing = TimingConfig {
            mode: match t.mode {
                ModeName::Element => SkipMode::ZeroSkipElement,
                ModeName::Tile => SkipMode::ZeroSkipTile { tile_rows: t.tile_rows },
                ModeName::Dense => SkipMode::Dense,
            },
            cycles_per_mac: t.cycles_per_mac,
            cycles_skip_per_mac: t.cycles_skip_per_mac,
            cycles_base_per_layer: t.cycles_base_per_layer,
            noise_sigma: t.noise_sigma,
            energy_nonzero_per_op: t.energy_nonzero_per_op,
            energy_zero_per_op: t.energy_zero_per_op,
        };
        timing.validate().map_err(|e| invalid("timing", e))?;

        let defense = DefenseConfig {
            padding_budget_cycles: self.defense.padding_budget_cycles,
            disable_zero_skip: self.defense.disable_zero_skip,
            mask_confidences: self.defense.mask_confidences,
        };
        defense
            .validate()
            .map_err(|e| invalid("defense.padding_budget_cycles", e))?;

        let a = &self.attack;
        if a.histogram_bins == 0 {
            return Err(invalid("attack.histogram_bins", "must be >= 1"));
        }
        let attack = AttackConfig {
            repetitions: a.repetitions,
            clusters: a.clusters,
            kmeans_max_iter: a.kmeans_max_iter,
            n_trees: a.n_trees,
            max_depth: a.max_depth,
            learning_rate: a.learning_rate,
            baseline: a.baseline,
            features: a.features,
        };
        attack.validate().map_err(|e| invalid("attack", e))?;

        Ok(Benchmark {
            gen,
            fractions,
            victim: self.model,
            timing,
            defense,
            attack,
        })
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_benchmark() {
        let c = ExperimentConfig::from_toml("", "t").unwrap();
        assert_eq!(c.benchmark().unwrap(), Benchmark::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let e = ExperimentConfig::from_toml("[attack]\nrepetitons = 3\n", "t").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("attack"), "{msg}");
        assert!(msg.contains("repetitons"), "{msg}");
    }

    #[test]
    fn out_of_range_names_its_key() {
        let e = ExperimentConfig::from_toml("[gen]\nk_sensitive = 1\n", "t").unwrap_err();
        assert!(e.to_string().starts_with("gen:"), "{e}");
        assert!(e.to_string().contains("k_sensitive"), "{e}");
        let e = ExperimentConfig::from_toml("[attack]\nrepetitions = 0\n", "t").unwrap_err();
        assert!(e.to_string().contains("repetitions"), "{e}");
    }

    #[test]
    fn wrong_type_names_its_path() {
        let e = ExperimentConfig::from_toml("[model]\nwidth = \"wide\"\n", "t").unwrap_err();
        assert!(e.to_string().contains("model.width"), "{e}");
    }

    #[test]
    fn sections_parse() {
        let c = ExperimentConfig::from_toml(
            "base_seed = 9\n[timing]\nmode = \"tile\"\ntile_rows = 2\n[defense]\npadding_budget_cycles = 100.0\n[attack]\nbaseline = \"empirical_prior\"\nfeatures = \"full\"\n",
            "t",
        )
        .unwrap();
        let b = c.benchmark().unwrap();
        assert_eq!(c.base_seed, 9);
        assert_eq!(b.timing.mode, SkipMode::ZeroSkipTile { tile_rows: 2 });
        assert_eq!(b.defense.padding_budget_cycles, Some(100.0));
        assert_eq!(b.attack.baseline, BaselineKind::EmpiricalPrior);
        assert_eq!(b.attack.features, FeatureSet::Full);
    }
}
