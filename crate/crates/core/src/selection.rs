//! Class-balanced selection: cluster the pool, give each cluster a share of
//! the budget proportional to its size (rounded up), greedily pick samples whose
//! Gaussian best matches the cluster's, then randomly drop the overshoot.

use itertools::Itertools;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};
use crate::features::{squared_distance, FeatureStore};
use crate::gaussian::{kl_divergence, DiagonalGaussian, MomentAccumulator, DEFAULT_VAR_FLOOR};
use crate::kmeans::{kmeans, KMeansParams};
use crate::rng;
use crate::SampleId;

pub const DEFAULT_BRUTE_FORCE_GUARD: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub var_floor: f64,
    pub kmeans: KMeansParams,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            var_floor: DEFAULT_VAR_FLOOR,
            kmeans: KMeansParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total_budget: usize,
    pub per_cluster: Vec<usize>,
    pub pool_size: usize,
}

impl BudgetPlan {
    pub fn allocated(&self) -> usize {
        self.per_cluster.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub ids: Vec<SampleId>,
    pub per_cluster: Vec<Vec<SampleId>>,
    pub discarded: Vec<SampleId>,
}

impl Selection {
    /// A selection that is not organized by clusters.
    pub fn flat(ids: Vec<SampleId>) -> Self {
        Selection {
            per_cluster: vec![ids.clone()],
            ids,
            discarded: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub iterations_run: usize,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbsOutcome {
    pub selection: Selection,
    pub budget: BudgetPlan,
    pub clustering: ClusterSummary,
}

/// `K_j = min(M_j, ceil(M_j * B / N))`.
pub fn allocate_budget(cluster_sizes: &[usize], budget: usize) -> Result<BudgetPlan> {
    let pool_size: usize = cluster_sizes.iter().sum();
    if budget > pool_size {
        return Err(CbsError::BudgetExceedsPool {
            budget,
            pool: pool_size,
        });
    }
    if let Some(j) = cluster_sizes.iter().position(|&m| m == 0) {
        return Err(CbsError::IndexOutOfRange {
            index: j,
            len: cluster_sizes.len(),
        });
    }
    let per_cluster = cluster_sizes
        .iter()
        .map(|&m| {
            let scaled = (m as u128) * (budget as u128);
            let k = scaled.div_ceil(pool_size as u128) as usize;
            k.min(m)
        })
        .collect();
    Ok(BudgetPlan {
        total_budget: budget,
        per_cluster,
        pool_size,
    })
}

/// Row order of `members` sorted by id, so every argmin below breaks ties
/// toward the lowest id.
fn rows_by_id(members: &FeatureStore) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..members.len()).collect();
    rows.sort_by_key(|&r| members.id_at(r));
    rows
}

/// Row of the member closest (Euclidean) to `mean`, lowest id on ties.
fn closest_to(members: &FeatureStore, rows: &[usize], mean: &[f64]) -> usize {
    let mut best = (f64::INFINITY, rows[0]);
    for &r in rows {
        let d = squared_distance(members.row(r), mean);
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Greedy KL-matching pick of `k` members, returned in pick order.
pub fn greedy_select_cluster(
    members: &FeatureStore,
    k: usize,
    var_floor: f64,
) -> Result<Vec<SampleId>> {
    Ok(greedy_trace(members, k, var_floor)?
        .into_iter()
        .map(|step| step.id)
        .collect())
}

/// One greedy step: the chosen id and the KL of the selected set after adding it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyStep {
    pub id: SampleId,
    pub kl: f64,
}

pub fn greedy_trace(members: &FeatureStore, k: usize, var_floor: f64) -> Result<Vec<GreedyStep>> {
    let m = members.len();
    if k > m {
        return Err(CbsError::KTooLarge { k, n: m });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let reference = DiagonalGaussian::estimate(members.rows().map(|(_, v)| v), var_floor)?;
    let mut remaining = rows_by_id(members);

    let first = closest_to(members, &remaining, &reference.mean);
    remaining.retain(|&r| r != first);
    let mut acc = MomentAccumulator::new(members.dim());
    acc.push(members.row(first))?;
    let first_kl = kl_divergence(&reference, &acc.finalize(var_floor)?)?;
    let mut steps = vec![GreedyStep {
        id: members.id_at(first),
        kl: first_kl,
    }];

    while steps.len() < k {
        let mut best = (f64::INFINITY, 0usize);
        for (slot, &r) in remaining.iter().enumerate() {
            let kl = acc.kl_with_candidate(&reference, members.row(r), var_floor);
            if kl < best.0 {
                best = (kl, slot);
            }
        }
        let r = remaining.remove(best.1);
        acc.push(members.row(r))?;
        steps.push(GreedyStep {
            id: members.id_at(r),
            kl: best.0,
        });
    }
    Ok(steps)
}

/// Number of `k`-subsets of `n`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Exhaustive KL-optimal `k`-subset. Ties go to the lexicographically
/// smallest id tuple.
pub fn brute_force_select(
    members: &FeatureStore,
    k: usize,
    var_floor: f64,
    guard: u64,
) -> Result<(Vec<SampleId>, f64)> {
    let m = members.len();
    if k > m {
        return Err(CbsError::KTooLarge { k, n: m });
    }
    let count = binomial(m, k);
    if count > guard as u128 {
        return Err(CbsError::CombinatorialGuard {
            n: m,
            k,
            count,
            guard,
        });
    }
    if k == 0 {
        return Err(CbsError::EmptyInput);
    }
    let reference = DiagonalGaussian::estimate(members.rows().map(|(_, v)| v), var_floor)?;
    let rows = rows_by_id(members);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for combo in rows.iter().copied().combinations(k) {
        let fit = DiagonalGaussian::estimate(combo.iter().map(|&r| members.row(r)), var_floor)?;
        let kl = kl_divergence(&reference, &fit)?;
        if best.as_ref().is_none_or(|(b, _)| kl < *b) {
            best = Some((kl, combo));
        }
    }
    let (kl, combo) = best.expect("at least one combination");
    Ok((combo.into_iter().map(|r| members.id_at(r)).collect(), kl))
}

/// Full selection over a normalized pool. `session` keys the random streams
/// so different sessions under one root seed draw independently.
pub fn cbs_select(
    store: &FeatureStore,
    num_classes: usize,
    budget: usize,
    seed: u64,
    session: u64,
    params: &SelectionParams,
) -> Result<CbsOutcome> {
    if budget == 0 {
        return Err(CbsError::ZeroBudget);
    }
    if budget > store.len() {
        return Err(CbsError::BudgetExceedsPool {
            budget,
            pool: store.len(),
        });
    }
    let clustering = kmeans(
        store,
        num_classes,
        rng::derive_seed(seed, "kmeans", session),
        &params.kmeans,
    )?;
    let sizes = clustering.cluster_sizes();
    let plan = allocate_budget(&sizes, budget)?;

    let mut per_cluster = Vec::with_capacity(num_classes);
    for (j, &k) in plan.per_cluster.iter().enumerate() {
        let members = store.subset(&clustering.cluster_members(j)?)?;
        per_cluster.push(greedy_select_cluster(&members, k, params.var_floor)?);
    }

    let assembled: Vec<SampleId> = per_cluster.iter().flatten().copied().collect();
    let excess = assembled.len() - budget;
    let mut drop = vec![false; assembled.len()];
    if excess > 0 {
        let mut r = rng::stream(seed, "discard", session);
        for pos in index::sample(&mut r, assembled.len(), excess) {
            drop[pos] = true;
        }
    }
    let (discarded, ids): (Vec<_>, Vec<_>) = assembled.iter().zip(&drop).partition(|(_, d)| **d);

    Ok(CbsOutcome {
        selection: Selection {
            ids: ids.into_iter().map(|(id, _)| *id).collect(),
            per_cluster,
            discarded: discarded.into_iter().map(|(id, _)| *id).collect(),
        },
        budget: plan,
        clustering: ClusterSummary {
            k: clustering.k,
            sizes,
            iterations_run: clustering.iterations_run,
            inertia: clustering.inertia,
        },
    })
}
