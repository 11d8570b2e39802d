//! One-vs-rest gradient-boosted regression trees with logistic loss.
//!
//! For each class `c`, the score starts at the log-odds of the class prior
//! and each round fits a regression tree to the residuals `y − σ(F)`. Trees
//! are grown greedily by exact split search on squared-error reduction; a
//! leaf predicts the mean residual of its rows, scaled by the learning rate.
//! Any node with non-constant residuals is split, even at zero gain, so
//! depth-2 trees can express interactions such as XOR. Split ties go to the
//! lowest feature index, then the lowest threshold.

use super::AttackError;
use crate::util::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Kept with the model for provenance. Training is deterministic without
    /// it since every tie-break is positional.
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.n_trees == 0 || self.max_depth == 0 {
            return Err(AttackError::InvalidConfig("n_trees and max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(AttackError::InvalidConfig("learning_rate must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn eval(&self, row: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.eval(row)
                } else {
                    right.eval(row)
                }
            }
        }
    }

    fn for_each_split(&self, f: &mut impl FnMut(usize, f64)) {
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = self
        {
            f(*feature, *threshold);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    n_features: usize,
    n_classes: usize,
    config: GbdtConfig,
    base_scores: Vec<f64>,
    /// `ensembles[c]` are the trees of class `c`, leaf values already scaled.
    ensembles: Vec<Vec<Node>>,
    constant: Option<usize>,
}

impl GbdtModel {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn config(&self) -> &GbdtConfig {
        &self.config
    }

    /// `Some(class)` when training saw a single class and the model is a
    /// constant classifier.
    pub fn constant_class(&self) -> Option<usize> {
        self.constant
    }

    pub fn n_trees(&self) -> usize {
        self.ensembles.iter().map(Vec::len).sum()
    }

    /// Every internal node's `(feature, threshold)`.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for tree in self.ensembles.iter().flatten() {
            tree.for_each_split(&mut |f, t| out.push((f, t)));
        }
        out
    }

    pub fn scores(&self, row: &[f64]) -> Result<Vec<f64>, AttackError> {
        if row.len() != self.n_features {
            return Err(AttackError::FeatureLayoutMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(self
            .base_scores
            .iter()
            .zip(&self.ensembles)
            .map(|(b, trees)| b + trees.iter().map(|t| t.eval(row)).sum::<f64>())
            .collect())
    }

    /// Class with the highest one-vs-rest score, ties to the lowest index.
    pub fn predict(&self, row: &[f64]) -> Result<usize, AttackError> {
        let scores = self.scores(row)?;
        if let Some(c) = self.constant {
            return Ok(c);
        }
        Ok(argmax(&scores))
    }
}

/// Gains closer than this count as equal, so the earlier candidate stays.
const GAIN_TIE_TOLERANCE: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn train(rows: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &GbdtConfig) -> Result<GbdtModel, AttackError> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if rows.len() != labels.len() {
        return Err(AttackError::LengthMismatch {
            left: rows.len(),
            right: labels.len(),
        });
    }
    let n_features = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != n_features) {
        return Err(AttackError::FeatureLayoutMismatch {
            expected: n_features,
            got: bad.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(AttackError::LabelOutOfRange { label: l, n_classes });
    }

    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Ok(GbdtModel {
            n_features,
            n_classes,
            config: *cfg,
            base_scores: (0..n_classes).map(|c| if c == first { 1.0 } else { 0.0 }).collect(),
            ensembles: vec![Vec::new(); n_classes],
            constant: Some(first),
        });
    }

    // Pre-sorted row order per feature, shared by every tree.
    let sorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let n = rows.len() as f64;
    let mut base_scores = Vec::with_capacity(n_classes);
    let mut ensembles = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
        let prior = (y.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
        let base = (prior / (1.0 - prior)).ln();
        let mut f = vec![base; rows.len()];
        let mut trees = Vec::with_capacity(cfg.n_trees);
        for _ in 0..cfg.n_trees {
            let residual: Vec<f64> = y.iter().zip(&f).map(|(yi, fi)| yi - sigmoid(*fi)).collect();
            let members = vec![true; rows.len()];
            let tree = grow(rows, &sorted, &residual, &members, cfg.max_depth, cfg.learning_rate);
            for (fi, row) in f.iter_mut().zip(rows) {
                *fi += tree.eval(row);
            }
            trees.push(tree);
        }
        base_scores.push(base);
        ensembles.push(trees);
    }
    Ok(GbdtModel {
        n_features,
        n_classes,
        config: *cfg,
        base_scores,
        ensembles,
        constant: None,
    })
}

fn grow(
    rows: &[Vec<f64>],
    sorted: &[Vec<usize>],
    residual: &[f64],
    members: &[bool],
    depth_left: usize,
    lr: f64,
) -> Node {
    let (count, sum) = members
        .iter()
        .zip(residual)
        .filter(|(m, _)| **m)
        .fold((0usize, 0.0), |(c, s), (_, r)| (c + 1, s + r));
    let leaf = Node::Leaf(lr * sum / count as f64);
    if depth_left == 0 || count < 2 {
        return leaf;
    }

    let sq: f64 = members
        .iter()
        .zip(residual)
        .filter(|(m, _)| **m)
        .map(|(_, r)| r * r)
        .sum();
    let parent = sum * sum / count as f64;
    if sq - parent <= 1e-24 * count as f64 {
        return leaf;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    for (feature, order) in sorted.iter().enumerate() {
        let mut left_sum = 0.0;
        let mut prev: Option<usize> = None;
        for (left_n, &i) in order.iter().filter(|&&i| members[i]).enumerate() {
            if let Some(p) = prev {
                let (a, b) = (rows[p][feature], rows[i][feature]);
                if a < b {
                    let right_n = count - left_n;
                    let right_sum = sum - left_sum;
                    let gain = left_sum * left_sum / left_n as f64 + right_sum * right_sum / right_n as f64 - parent;
                    if best.is_none_or(|(g, _, _)| gain > g + GAIN_TIE_TOLERANCE) {
                        let mut threshold = a + (b - a) / 2.0;
                        if threshold >= b {
                            threshold = a;
                        }
                        best = Some((gain, feature, threshold));
                    }
                }
            }
            left_sum += residual[i];
            prev = Some(i);
        }
    }

    let Some((_, feature, threshold)) = best else {
        return leaf;
    };
    let left_members: Vec<bool> = members
        .iter()
        .zip(rows)
        .map(|(&m, r)| m && r[feature] <= threshold)
        .collect();
    let right_members: Vec<bool> = members
        .iter()
        .zip(&left_members)
        .map(|(&m, &l)| m && !l)
        .collect();
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(rows, sorted, residual, &left_members, depth_left - 1, lr)),
        right: Box::new(grow(rows, sorted, residual, &right_members, depth_left - 1, lr)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_accuracy(model: &GbdtModel, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(r, l)| model.predict(r).unwrap() == **l)
            .count();
        hits as f64 / rows.len() as f64
    }

    /// Best single-threshold classifier by exhaustive search.
    fn stump_oracle(xs: &[f64], labels: &[usize]) -> f64 {
        let mut best: f64 = 0.0;
        for &t in xs {
            for flip in [false, true] {
                let hits = xs
                    .iter()
                    .zip(labels)
                    .filter(|(x, l)| ((**x >= t) ^ flip) as usize == **l)
                    .count();
                best = best.max(hits as f64 / xs.len() as f64);
            }
        }
        best
    }

    #[test]
    fn threshold_separable_latency() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 2.5).collect();
        let labels: Vec<usize> = xs.iter().map(|&x| usize::from(x >= 50.0)).collect();
        assert_eq!(stump_oracle(&xs, &labels), 1.0);
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let cfg = GbdtConfig {
            n_trees: 10,
            max_depth: 1,
            learning_rate: 0.1,
            seed: 0,
        };
        let m = train(&rows, &labels, 2, &cfg).unwrap();
        assert_eq!(train_accuracy(&m, &rows, &labels), 1.0);
        assert_eq!(m.predict(&[10.0]).unwrap(), 0);
        assert_eq!(m.predict(&[90.0]).unwrap(), 1);
    }

    #[test]
    fn xor_needs_depth_two() {
        let table = [([0.0, 0.0], 0usize), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 0)];
        // Truth-table oracle: the labels are exactly a XOR b.
        assert!(table.iter().all(|(x, y)| ((x[0] as usize) ^ (x[1] as usize)) == *y));
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..5 {
            for (x, y) in table {
                rows.push(x.to_vec());
                labels.push(y);
            }
        }
        let cfg = GbdtConfig {
            n_trees: 50,
            max_depth: 2,
            learning_rate: 0.3,
            seed: 0,
        };
        let m = train(&rows, &labels, 2, &cfg).unwrap();
        assert_eq!(train_accuracy(&m, &rows, &labels), 1.0);
    }

    #[test]
    fn single_class_gives_constant_model() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        let m = train(&rows, &[2, 2, 2], 4, &GbdtConfig::default()).unwrap();
        assert_eq!(m.constant_class(), Some(2));
        assert_eq!(m.predict(&[-100.0]).unwrap(), 2);
        assert_eq!(m.predict(&[1e9]).unwrap(), 2);
    }

    #[test]
    fn tied_scores_take_lowest_class() {
        // Two identical rows with different labels leave both classes level.
        let rows = vec![vec![1.0], vec![1.0]];
        let m = train(&rows, &[1, 0], 2, &GbdtConfig::default()).unwrap();
        let s = m.scores(&[1.0]).unwrap();
        assert_eq!(s[0], s[1]);
        assert_eq!(m.predict(&[1.0]).unwrap(), 0);
    }

    #[test]
    fn splits_are_finite_and_in_range() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i * 13 % 11) as f64]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let m = train(&rows, &labels, 3, &GbdtConfig::default()).unwrap();
        assert!(!m.splits().is_empty());
        assert!(m.splits().iter().all(|&(f, t)| f < 2 && t.is_finite()));
    }

    #[test]
    fn errors() {
        let cfg = GbdtConfig::default();
        assert_eq!(train(&[], &[], 2, &cfg), Err(AttackError::EmptyDataset));
        let m = train(&[vec![0.0], vec![1.0]], &[0, 1], 2, &cfg).unwrap();
        assert_eq!(
            m.predict(&[0.0, 1.0]),
            Err(AttackError::FeatureLayoutMismatch { expected: 1, got: 2 })
        );
        let bad = GbdtConfig {
            learning_rate: 1.5,
            ..cfg
        };
        assert!(train(&[vec![0.0]], &[0], 2, &bad).is_err());
    }
}
