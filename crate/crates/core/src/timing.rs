//! Zero-skipping accelerator cost and energy model.
//!
//! A forward pass is priced weight matrix by weight matrix. The first matrix
//! consumes the raw input and is always executed densely. Every later matrix
//! consumes a hidden activation vector; each multiply-accumulate whose
//! activation operand is zero may be skipped, depending on [`SkipMode`].
//!
//! Cycle and energy totals are assembled from integer MAC counts, so they
//! do not depend on summation order.

use rand_distr::{Distribution, Normal};

use crate::nn::{ActivationStats, ModelSpec};
use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TimingError {
    #[error("activation stats do not match the model shape")]
    InconsistentStats,
    #[error("invalid timing config: {0}")]
    InvalidConfig(String),
}

/// Skip granularity of the modelled accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    /// Each MAC with a zero activation operand is skipped.
    ZeroSkipElement,
    /// Activations are grouped in contiguous blocks of `tile_rows`; a block is
    /// skipped only when every activation in it is zero.
    ZeroSkipTile { tile_rows: usize },
    /// No skipping; every MAC is executed.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingConfig {
    pub mode: SkipMode,
    pub cycles_per_mac: f64,
    pub cycles_skip_per_mac: f64,
    pub cycles_base_per_layer: f64,
    /// Standard deviation of the additive measurement noise, in cycles.
    pub noise_sigma: f64,
    /// nJ per MAC with a nonzero activation operand.
    pub energy_nonzero_per_op: f64,
    /// nJ per MAC with a zero activation operand.
    pub energy_zero_per_op: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            mode: SkipMode::ZeroSkipElement,
            cycles_per_mac: 1.0,
            cycles_skip_per_mac: 0.0,
            cycles_base_per_layer: 1000.0,
            noise_sigma: 500.0,
            energy_nonzero_per_op: 15.0,
            energy_zero_per_op: 12.0,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<(), TimingError> {
        let bad = |msg: &str| Err(TimingError::InvalidConfig(msg.to_owned()));
        let finite = [
            self.cycles_per_mac,
            self.cycles_skip_per_mac,
            self.cycles_base_per_layer,
            self.noise_sigma,
            self.energy_nonzero_per_op,
            self.energy_zero_per_op,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if self.cycles_per_mac <= 0.0 {
            return bad("cycles_per_mac must be > 0");
        }
        if self.cycles_skip_per_mac < 0.0 || self.cycles_skip_per_mac > self.cycles_per_mac {
            return bad("cycles_skip_per_mac must lie in [0, cycles_per_mac]");
        }
        if self.cycles_base_per_layer < 0.0 {
            return bad("cycles_base_per_layer must be >= 0");
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0");
        }
        if self.energy_zero_per_op <= 0.0 || self.energy_nonzero_per_op <= 0.0 {
            return bad("per-op energies must be > 0");
        }
        if self.energy_zero_per_op > self.energy_nonzero_per_op {
            return bad("energy_zero_per_op must not exceed energy_nonzero_per_op");
        }
        if let SkipMode::ZeroSkipTile { tile_rows: 0 } = self.mode {
            return bad("tile_rows must be >= 1");
        }
        Ok(())
    }

    /// Same parameters with skipping disabled.
    pub fn dense(&self) -> Self {
        Self {
            mode: SkipMode::Dense,
            ..*self
        }
    }
}

/// MAC tally of one priced forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacCounts {
    /// MACs charged at `cycles_per_mac`.
    pub executed: u64,
    /// MACs charged at `cycles_skip_per_mac`.
    pub skipped: u64,
    /// Weight matrices, each charged `cycles_base_per_layer`.
    pub matrices: u64,
}

impl MacCounts {
    pub fn cycles(&self, cfg: &TimingConfig) -> f64 {
        self.executed as f64 * cfg.cycles_per_mac
            + self.skipped as f64 * cfg.cycles_skip_per_mac
            + self.matrices as f64 * cfg.cycles_base_per_layer
    }
}

fn check(stats: &ActivationStats, spec: &ModelSpec) -> Result<(), TimingError> {
    if stats.matches(spec) {
        Ok(())
    } else {
        Err(TimingError::InconsistentStats)
    }
}

/// Number of activation entries charged densely under `mode`.
fn charged_rows(mask: &[bool], mode: SkipMode) -> u64 {
    match mode {
        SkipMode::Dense => mask.len() as u64,
        SkipMode::ZeroSkipElement => mask.iter().filter(|&&b| b).count() as u64,
        SkipMode::ZeroSkipTile { tile_rows } => mask
            .chunks(tile_rows)
            .filter(|block| block.iter().any(|&b| b))
            .map(|block| block.len() as u64)
            .sum(),
    }
}

pub fn mac_counts(stats: &ActivationStats, spec: &ModelSpec, mode: SkipMode) -> Result<MacCounts, TimingError> {
    check(stats, spec)?;
    let shapes = spec.weight_shapes();
    let (in_rows, in_cols) = shapes[0];
    let mut counts = MacCounts {
        executed: (in_rows * in_cols) as u64,
        skipped: 0,
        matrices: shapes.len() as u64,
    };
    for (mask, &(rows, cols)) in stats.hidden_masks().iter().zip(&shapes[1..]) {
        let charged = charged_rows(mask, mode);
        counts.executed += charged * cols as u64;
        counts.skipped += (rows as u64 - charged) * cols as u64;
    }
    Ok(counts)
}

/// Cycles of one forward pass with the given activation masks.
pub fn cost(stats: &ActivationStats, spec: &ModelSpec, cfg: &TimingConfig) -> Result<f64, TimingError> {
    Ok(mac_counts(stats, spec, cfg.mode)?.cycles(cfg))
}

/// Cycles of a fully dense forward pass: the padding ceiling.
pub fn worst_case_cycles(spec: &ModelSpec, cfg: &TimingConfig) -> f64 {
    mac_counts(&ActivationStats::dense(spec), spec, SkipMode::Dense)
        .expect("dense stats always match their spec")
        .cycles(cfg)
}

/// Energy of one forward pass in nJ.
///
/// With skipping enabled, MACs on a zero operand draw `energy_zero_per_op`
/// and the rest `energy_nonzero_per_op`; the input matrix is keyed on input
/// entries. In [`SkipMode::Dense`] every MAC draws `energy_nonzero_per_op`.
pub fn energy(stats: &ActivationStats, spec: &ModelSpec, cfg: &TimingConfig) -> Result<f64, TimingError> {
    check(stats, spec)?;
    let total_macs = spec.weight_shapes().iter().map(|&(r, c)| (r * c) as u64).sum::<u64>();
    if cfg.mode == SkipMode::Dense {
        return Ok(total_macs as f64 * cfg.energy_nonzero_per_op);
    }
    let shapes = spec.weight_shapes();
    let masks = std::iter::once(stats.input_mask()).chain(stats.hidden_masks().iter().map(Vec::as_slice));
    let mut nonzero_macs = 0u64;
    for (mask, &(_, cols)) in masks.zip(&shapes) {
        nonzero_macs += mask.iter().filter(|&&b| b).count() as u64 * cols as u64;
    }
    let zero_macs = total_macs - nonzero_macs;
    Ok(nonzero_macs as f64 * cfg.energy_nonzero_per_op + zero_macs as f64 * cfg.energy_zero_per_op)
}

/// Adds seeded Gaussian jitter with standard deviation `noise_sigma`,
/// clamped at zero.
pub fn observe(cycles_true: f64, cfg: &TimingConfig, noise_seed: u64) -> f64 {
    if cfg.noise_sigma == 0.0 {
        return cycles_true;
    }
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated non-negative and finite");
    let mut rng = seed::rng(noise_seed);
    (cycles_true + normal.sample(&mut rng)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec4() -> ModelSpec {
        ModelSpec::new(4, 1, 4, 4).unwrap()
    }

    fn stats_with(hidden: Vec<bool>) -> ActivationStats {
        ActivationStats::from_masks(vec![true; 4], vec![hidden])
    }

    fn cfg(mode: SkipMode) -> TimingConfig {
        TimingConfig {
            mode,
            cycles_per_mac: 1.0,
            cycles_skip_per_mac: 0.0,
            cycles_base_per_layer: 0.0,
            noise_sigma: 0.0,
            ..TimingConfig::default()
        }
    }

    #[test]
    fn fully_skipped_output_layer_costs_nothing() {
        let c = cost(&stats_with(vec![false; 4]), &spec4(), &cfg(SkipMode::ZeroSkipElement)).unwrap();
        assert_eq!(c, 16.0);
    }

    #[test]
    fn dense_hidden_costs_every_mac() {
        let c = cost(&stats_with(vec![true; 4]), &spec4(), &cfg(SkipMode::ZeroSkipElement)).unwrap();
        assert_eq!(c - 16.0, 16.0);
    }

    #[test]
    fn half_sparse_hidden() {
        let c = cost(
            &stats_with(vec![true, false, true, false]),
            &spec4(),
            &cfg(SkipMode::ZeroSkipElement),
        )
        .unwrap();
        assert_eq!(c - 16.0, 8.0);
    }

    #[test]
    fn tile_blocks_charge_densely_when_any_entry_is_live() {
        let s = stats_with(vec![true, false, false, false]);
        let tile2 = cost(&s, &spec4(), &cfg(SkipMode::ZeroSkipTile { tile_rows: 2 })).unwrap();
        assert_eq!(tile2, 16.0 + 8.0);
        let tile3 = cost(&s, &spec4(), &cfg(SkipMode::ZeroSkipTile { tile_rows: 3 })).unwrap();
        assert_eq!(tile3, 16.0 + 12.0);
        let s = stats_with(vec![false, false, false, true]);
        let tile3 = cost(&s, &spec4(), &cfg(SkipMode::ZeroSkipTile { tile_rows: 3 })).unwrap();
        assert_eq!(tile3, 16.0 + 4.0);
    }

    #[test]
    fn worst_case_sums_dense_macs() {
        assert_eq!(worst_case_cycles(&spec4(), &cfg(SkipMode::ZeroSkipElement)), 32.0);
        let d = TimingConfig::default();
        // 4 matrices of 4x4 at 1 cycle each plus 2 base charges.
        assert_eq!(worst_case_cycles(&spec4(), &d), 32.0 + 2000.0);
    }

    #[test]
    fn dense_mode_ignores_sparsity() {
        let c = cfg(SkipMode::Dense);
        let wc = worst_case_cycles(&spec4(), &c);
        for hidden in [vec![false; 4], vec![true, false, true, true], vec![true; 4]] {
            assert_eq!(cost(&stats_with(hidden), &spec4(), &c).unwrap(), wc);
        }
    }

    #[test]
    fn mismatched_stats_rejected() {
        let s = ActivationStats::from_masks(vec![true; 4], vec![vec![true; 3]]);
        assert_eq!(
            cost(&s, &spec4(), &TimingConfig::default()),
            Err(TimingError::InconsistentStats)
        );
        assert_eq!(
            energy(&s, &spec4(), &TimingConfig::default()),
            Err(TimingError::InconsistentStats)
        );
    }

    #[test]
    fn energy_per_mac_defaults() {
        let spec = ModelSpec::new(1, 1, 1, 1).unwrap();
        let d = TimingConfig::default();
        let live = ActivationStats::from_masks(vec![true], vec![vec![true]]);
        let dead = ActivationStats::from_masks(vec![false], vec![vec![false]]);
        // Two MACs (input and output matrix), one operand state each.
        assert_eq!(energy(&live, &spec, &d).unwrap(), 2.0 * 15.0);
        assert_eq!(energy(&dead, &spec, &d).unwrap(), 2.0 * 12.0);
        assert_eq!(energy(&dead, &spec, &d.dense()).unwrap() / energy(&dead, &spec, &d).unwrap(), 1.25);
    }

    #[test]
    fn observe_is_seeded_and_clamped() {
        let mut c = TimingConfig::default();
        assert_eq!(observe(1234.5, &cfg(SkipMode::Dense), 99), 1234.5);
        assert_eq!(observe(5000.0, &c, 3), observe(5000.0, &c, 3));
        c.noise_sigma = 1e6;
        assert!((0..200).all(|s| observe(10.0, &c, s) >= 0.0));
    }

    #[test]
    fn validate_catches_inverted_parameters() {
        let mut c = TimingConfig::default();
        c.cycles_skip_per_mac = 2.0;
        assert!(c.validate().is_err());
        let mut c = TimingConfig::default();
        c.energy_zero_per_op = 20.0;
        assert!(c.validate().is_err());
        let c = TimingConfig {
            mode: SkipMode::ZeroSkipTile { tile_rows: 0 },
            ..TimingConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TimingConfig::default().validate().is_ok());
    }
}
