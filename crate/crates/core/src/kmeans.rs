//! Lloyd's k-means with k-means++ seeding and empty-cluster repair.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};
use crate::features::{squared_distance, FeatureStore};
use crate::rng;
use crate::SampleId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    /// Cluster index per row of the clustered store.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub inertia: f64,
    ids: Vec<SampleId>,
}

impl Clustering {
    /// Ids assigned to cluster `j`, ascending.
    pub fn cluster_members(&self, j: usize) -> Result<Vec<SampleId>> {
        if j >= self.k {
            return Err(CbsError::IndexOutOfRange {
                index: j,
                len: self.k,
            });
        }
        let mut members: Vec<SampleId> = self
            .assignments
            .iter()
            .zip(&self.ids)
            .filter(|(a, _)| **a == j)
            .map(|(_, id)| *id)
            .collect();
        members.sort_unstable();
        Ok(members)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }
}

/// Clusters a normalized store into `k` groups. Deterministic for a given seed.
pub fn kmeans(
    store: &FeatureStore,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<Clustering> {
    if k == 0 {
        return Err(CbsError::ZeroClusters);
    }
    if k > store.len() {
        return Err(CbsError::KTooLarge { k, n: store.len() });
    }
    if !store.is_normalized() {
        return Err(CbsError::NotNormalized);
    }
    let n = store.len();
    let dim = store.dim();
    let mut rng = rng::Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(store, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut inertia = assign(store, &centroids, &mut assignments);
    let mut iterations_run = 0;

    for _ in 0..params.max_iter {
        iterations_run += 1;
        let updated = update_centroids(store, &assignments, &centroids, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let next = assign(store, &centroids, &mut assignments);
        debug_assert!(
            next <= inertia + 1e-9 * inertia.max(1.0),
            "inertia increased: {inertia} -> {next}"
        );
        inertia = next;
        if shift < params.tol {
            break;
        }
    }

    inertia = repair_empty(store, &mut assignments, &mut centroids, k, dim);

    Ok(Clustering {
        k,
        assignments,
        centroids,
        iterations_run,
        inertia,
        ids: store.ids().to_vec(),
    })
}

fn plus_plus_init(store: &FeatureStore, k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = store.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![store.row(first).to_vec()];
    let mut closest: Vec<f64> = (0..n)
        .map(|i| squared_distance(store.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = closest
            .iter()
            .zip(&chosen)
            .filter(|(_, c)| !**c)
            .map(|(d, _)| d)
            .sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] || closest[i] <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < closest[i] {
                    break;
                }
                target -= closest[i];
            }
            pick.expect("positive total weight implies a candidate")
        } else {
            // every remaining point duplicates a centroid; pick uniformly
            let remaining: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            remaining[rng.random_range(0..remaining.len())]
        };
        chosen[pick] = true;
        let c = store.row(pick).to_vec();
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(squared_distance(store.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point, ties to the lower centroid index. Returns inertia.
fn assign(store: &FeatureStore, centroids: &[Vec<f64>], assignments: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, slot) in assignments.iter_mut().enumerate() {
        let v = store.row(i);
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centroids.iter().enumerate() {
            let d = squared_distance(v, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        *slot = best.1;
        inertia += best.0;
    }
    inertia
}

/// Mean of each cluster's members; an empty cluster keeps its old centroid.
fn update_centroids(
    store: &FeatureStore,
    assignments: &[usize],
    previous: &[Vec<f64>],
    k: usize,
    dim: usize,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        sums[a]
            .iter_mut()
            .zip(store.row(i))
            .for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((mut s, c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.iter_mut().for_each(|x| *x /= c as f64);
                s
            }
        })
        .collect()
}

fn inertia_of(store: &FeatureStore, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(store.row(i), &centroids[a]))
        .sum()
}

/// Moves the point farthest from its centroid (taken from a cluster with at
/// least two members) into each empty cluster, then runs one more Lloyd step.
/// If that step empties a cluster again the repair is repeated a few times and
/// finally applied without reassignment.
fn repair_empty(
    store: &FeatureStore,
    assignments: &mut [usize],
    centroids: &mut Vec<Vec<f64>>,
    k: usize,
    dim: usize,
) -> f64 {
    const MAX_ROUNDS: usize = 10;
    for round in 0..=MAX_ROUNDS {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        if counts.iter().all(|&c| c > 0) {
            break;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far: Option<(f64, usize)> = None;
            for (i, &a) in assignments.iter().enumerate() {
                if counts[a] < 2 {
                    continue;
                }
                let d = squared_distance(store.row(i), &centroids[a]);
                // strict > keeps the lowest row on ties
                if far.is_none_or(|(best, _)| d > best) {
                    far = Some((d, i));
                }
            }
            let (_, i) = far.expect("k <= n guarantees a cluster with two members");
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            centroids[j] = store.row(i).to_vec();
        }
        *centroids = update_centroids(store, assignments, centroids, k, dim);
        if round < MAX_ROUNDS {
            assign(store, centroids, assignments);
        }
    }
    inertia_of(store, assignments, centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn unit_store(points: &[[f64; 2]]) -> FeatureStore {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        FeatureStore::from_matrix(2, &flat, None)
            .unwrap()
            .l2_normalize()
            .unwrap()
    }

    fn random_unit_store(n: usize, dim: usize, seed: u64) -> FeatureStore {
        let mut r = rng::stream(seed, "test", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..n * dim).map(|_| normal.sample(&mut r)).collect();
        FeatureStore::from_matrix(dim, &data, None)
            .unwrap()
            .l2_normalize()
            .unwrap()
    }

    #[test]
    fn single_cluster_is_the_global_mean() {
        let store = random_unit_store(30, 3, 1);
        let c = kmeans(&store, 1, 9, &KMeansParams::default()).unwrap();
        assert!(c.assignments.iter().all(|&a| a == 0));
        let mut mean = vec![0.0; 3];
        for (_, v) in store.rows() {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / 30.0);
        }
        for (got, want) in c.centroids[0].iter().zip(&mean) {
            assert!((got - want).abs() < 1e-12);
        }
        let total: f64 = store.rows().map(|(_, v)| squared_distance(v, &mean)).sum();
        assert!((c.inertia - total).abs() < 1e-9);
        assert_eq!(c.cluster_members(0).unwrap(), (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let store = random_unit_store(12, 4, 2);
        let c = kmeans(&store, 12, 3, &KMeansParams::default()).unwrap();
        assert!(c.inertia.abs() < 1e-20);
        let mut all = Vec::new();
        for j in 0..12 {
            let m = c.cluster_members(j).unwrap();
            assert_eq!(m.len(), 1);
            all.extend(m);
        }
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn duplicates_do_not_leave_empty_clusters() {
        let store = unit_store(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let c = kmeans(&store, 3, 0, &KMeansParams::default()).unwrap();
        assert!(c.cluster_sizes().iter().all(|&s| s >= 1));
        assert_eq!(c.cluster_sizes().iter().sum::<usize>(), 4);
    }

    #[test]
    fn separated_blobs_are_split_by_sign() {
        let mut r = rng::stream(42, "blobs", 0);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        for i in 0..100 {
            let cx = if i < 50 { 10.0 } else { -10.0 };
            data.push(cx + noise.sample(&mut r));
            data.push(noise.sample(&mut r));
        }
        let store = FeatureStore::from_matrix(2, &data, None)
            .unwrap()
            .l2_normalize()
            .unwrap();
        let c = kmeans(&store, 2, 7, &KMeansParams::default()).unwrap();
        let positive: Vec<SampleId> = (0..50).collect();
        let negative: Vec<SampleId> = (50..100).collect();
        let m0 = c.cluster_members(0).unwrap();
        let m1 = c.cluster_members(1).unwrap();
        assert!(
            (m0 == positive && m1 == negative) || (m0 == negative && m1 == positive),
            "blobs were mixed"
        );
    }

    #[test]
    fn errors() {
        let store = random_unit_store(3, 2, 0);
        assert!(matches!(
            kmeans(&store, 4, 0, &KMeansParams::default()),
            Err(CbsError::KTooLarge { k: 4, n: 3 })
        ));
        let raw = FeatureStore::from_matrix(2, &[3.0, 4.0, 1.0, 1.0], None).unwrap();
        assert!(matches!(
            kmeans(&raw, 1, 0, &KMeansParams::default()),
            Err(CbsError::NotNormalized)
        ));
        let c = kmeans(&store, 2, 0, &KMeansParams::default()).unwrap();
        assert!(matches!(
            c.cluster_members(2),
            Err(CbsError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn deterministic_and_covering() {
        let store = random_unit_store(200, 8, 4);
        let a = kmeans(&store, 6, 11, &KMeansParams::default()).unwrap();
        let b = kmeans(&store, 6, 11, &KMeansParams::default()).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<SampleId> = (0..6).flat_map(|j| a.cluster_members(j).unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert!(a.cluster_sizes().iter().all(|&s| s >= 1));
    }
}
