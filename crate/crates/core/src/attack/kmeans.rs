//! One-dimensional k-means over latency profiles, with labeled-subset
//! anchoring of clusters to attribute classes.

use rand::Rng;

use super::AttackError;
use crate::seed;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Sorted ascending.
    centroids: Vec<f64>,
    cluster_to_attribute: Vec<Option<usize>>,
}

impl ClusterModel {
    pub fn from_centroids(mut centroids: Vec<f64>) -> Self {
        centroids.sort_by(f64::total_cmp);
        let n = centroids.len();
        Self {
            centroids,
            cluster_to_attribute: vec![None; n],
        }
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn mapping(&self) -> &[Option<usize>] {
        &self.cluster_to_attribute
    }

    /// Index of the nearest centroid; ties go to the lower centroid.
    pub fn nearest(&self, latency: f64) -> usize {
        nearest(&self.centroids, latency)
    }

    /// Labels clusters from a labeled subset.
    ///
    /// Each labeled point votes for its nearest centroid. Cluster/attribute
    /// pairs are then taken greedily by vote count (ties: lower attribute,
    /// then lower cluster), skipping pairs whose cluster or attribute is
    /// already taken. Without conflicts this is the per-cluster majority;
    /// with conflicts it keeps the mapping injective. Clusters without votes
    /// stay unmapped.
    pub fn anchor(&self, labeled: &[(f64, usize)]) -> Self {
        let k = self.centroids.len();
        let n_attr = labeled.iter().map(|&(_, a)| a + 1).max().unwrap_or(0);
        let mut votes = vec![vec![0usize; n_attr]; k];
        for &(latency, attribute) in labeled {
            votes[self.nearest(latency)][attribute] += 1;
        }
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        for (c, row) in votes.iter().enumerate() {
            for (a, &v) in row.iter().enumerate() {
                if v > 0 {
                    pairs.push((v, a, c));
                }
            }
        }
        pairs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

        let mut mapping = vec![None; k];
        let mut taken = vec![false; n_attr];
        for (_, a, c) in pairs {
            if mapping[c].is_none() && !taken[a] {
                mapping[c] = Some(a);
                taken[a] = true;
            }
        }
        Self {
            centroids: self.centroids.clone(),
            cluster_to_attribute: mapping,
        }
    }

    /// Attribute of the nearest cluster.
    pub fn infer(&self, latency: f64) -> Result<usize, AttackError> {
        let c = self.nearest(latency);
        self.cluster_to_attribute[c].ok_or(AttackError::AmbiguousCluster { cluster: c })
    }
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        if (x - c).abs() < (x - centroids[best]).abs() {
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// Stops when assignments no longer change or after `max_iter` rounds. An
/// emptied cluster keeps its previous centroid.
pub fn cluster(latencies: &[f64], k: usize, seed_value: u64, max_iter: usize) -> Result<ClusterModel, AttackError> {
    let mut distinct = latencies.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return Err(AttackError::TooFewDistinctPoints {
            distinct: distinct.len(),
            k,
        });
    }

    let mut rng = seed::rng(seed::derive(seed_value, seed::stream::KMEANS, k as u64));
    let mut centroids = Vec::with_capacity(k);
    centroids.push(latencies[rng.random_range(0..latencies.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = latencies
            .iter()
            .map(|&x| centroids.iter().map(|&c| (x - c) * (x - c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("k <= distinct points");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(latencies[pick]);
    }

    let mut assign = vec![usize::MAX; latencies.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (a, &x) in assign.iter_mut().zip(latencies) {
            let c = nearest(&centroids, x);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &x) in assign.iter().zip(latencies) {
            sums[a] += x;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
    }
    Ok(ClusterModel::from_centroids(centroids))
}
