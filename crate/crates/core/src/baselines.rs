//! Comparison strategies sharing the [`Selection`] output: random,
//! class-balanced random (needs the oracle), entropy, margin, and k-center
//! coreset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};
use crate::features::{squared_distance, FeatureStore};
use crate::learner::{train_session, MemoryBuffer, PrototypeClassifier, ReplayParams};
use crate::protocol::Oracle;
use crate::rng;
use crate::selection::Selection;
use crate::{ClassId, SampleId};

pub const DEFAULT_ROUND_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    BalancedRandom,
    Entropy,
    Margin,
    Coreset,
    Cbs,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Random,
        StrategyKind::BalancedRandom,
        StrategyKind::Entropy,
        StrategyKind::Margin,
        StrategyKind::Coreset,
        StrategyKind::Cbs,
    ];

    /// Strategies that read true labels to select are a reference, not a method.
    pub fn reference_only(self) -> bool {
        matches!(self, StrategyKind::BalancedRandom)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::BalancedRandom => "balanced_random",
            StrategyKind::Entropy => "entropy",
            StrategyKind::Margin => "margin",
            StrategyKind::Coreset => "coreset",
            StrategyKind::Cbs => "cbs",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = CbsError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CbsError::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

fn check_budget(store: &FeatureStore, budget: usize) -> Result<()> {
    if budget == 0 {
        return Err(CbsError::ZeroBudget);
    }
    if budget > store.len() {
        return Err(CbsError::BudgetExceedsPool {
            budget,
            pool: store.len(),
        });
    }
    Ok(())
}

pub fn random_select(store: &FeatureStore, budget: usize, seed: u64) -> Result<Selection> {
    check_budget(store, budget)?;
    let mut r = rng::Rng::seed_from_u64(seed);
    let ids = index::sample(&mut r, store.len(), budget)
        .into_iter()
        .map(|row| store.id_at(row))
        .collect();
    Ok(Selection::flat(ids))
}

/// `⌊B/C⌋` per class with the remainder going to the lowest class ids, uniform
/// within each class. A class smaller than its quota gives everything it has
/// and the shortfall is drawn uniformly from the rest of the pool.
pub fn balanced_random_select(
    store: &FeatureStore,
    budget: usize,
    seed: u64,
    oracle: &Oracle,
) -> Result<Selection> {
    check_budget(store, budget)?;
    let mut by_class: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
    for &id in store.ids() {
        by_class.entry(oracle.label(id)?).or_default().push(id);
    }
    let classes = by_class.len();
    let base = budget / classes;
    let remainder = budget % classes;

    let mut r = rng::Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(budget);
    let mut per_cluster = Vec::with_capacity(classes);
    for (i, members) in by_class.values_mut().enumerate() {
        members.sort_unstable();
        let quota = base + usize::from(i < remainder);
        let take = quota.min(members.len());
        let picked: Vec<SampleId> = index::sample(&mut r, members.len(), take)
            .into_iter()
            .map(|j| members[j])
            .collect();
        chosen.extend_from_slice(&picked);
        per_cluster.push(picked);
    }
    let shortfall = budget - chosen.len();
    if shortfall > 0 {
        let taken: BTreeSet<SampleId> = chosen.iter().copied().collect();
        let rest: Vec<SampleId> = store
            .ids()
            .iter()
            .copied()
            .filter(|id| !taken.contains(id))
            .collect();
        let refill: Vec<SampleId> = index::sample(&mut r, rest.len(), shortfall)
            .into_iter()
            .map(|j| rest[j])
            .collect();
        chosen.extend_from_slice(&refill);
        per_cluster.push(refill);
    }
    Ok(Selection {
        ids: chosen,
        per_cluster,
        discarded: Vec::new(),
    })
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Gap between the two largest probabilities.
pub fn margin(p: &[f64]) -> f64 {
    let mut top = [f64::NEG_INFINITY; 2];
    for &x in p {
        if x > top[0] {
            top = [x, top[0]];
        } else if x > top[1] {
            top[1] = x;
        }
    }
    top[0] - top[1]
}

/// Top-`budget` ids by descending score, lowest id first on ties.
fn top_by_score(scored: Vec<(f64, SampleId)>, budget: usize) -> Vec<SampleId> {
    let mut scored = scored;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(budget).map(|(_, id)| id).collect()
}

fn scored_by<F>(
    store: &FeatureStore,
    clf: &PrototypeClassifier,
    score: F,
) -> Result<Vec<(f64, SampleId)>>
where
    F: Fn(&[f64]) -> f64,
{
    if clf.classes_seen().len() < 2 {
        return Err(CbsError::DegenerateClassifier(clf.classes_seen().len()));
    }
    store
        .rows()
        .map(|(id, f)| Ok((score(&clf.predict_proba(f)?), id)))
        .collect()
}

/// Selects the `budget` samples with the highest predictive entropy.
pub fn entropy_select(
    store: &FeatureStore,
    budget: usize,
    clf: &PrototypeClassifier,
) -> Result<Selection> {
    check_budget(store, budget)?;
    let scored = scored_by(store, clf, entropy)?;
    Ok(Selection::flat(top_by_score(scored, budget)))
}

/// Selects the `budget` samples with the smallest top-1/top-2 probability gap.
pub fn margin_select(
    store: &FeatureStore,
    budget: usize,
    clf: &PrototypeClassifier,
) -> Result<Selection> {
    check_budget(store, budget)?;
    let scored = scored_by(store, clf, |p| -margin(p))?;
    Ok(Selection::flat(top_by_score(scored, budget)))
}

/// Selection from explicit probability vectors, one per row of `store`.
pub fn entropy_select_from_proba(
    store: &FeatureStore,
    budget: usize,
    proba: &[Vec<f64>],
) -> Result<Selection> {
    check_budget(store, budget)?;
    let scored = proba_scores(store, proba, entropy)?;
    Ok(Selection::flat(top_by_score(scored, budget)))
}

pub fn margin_select_from_proba(
    store: &FeatureStore,
    budget: usize,
    proba: &[Vec<f64>],
) -> Result<Selection> {
    check_budget(store, budget)?;
    let scored = proba_scores(store, proba, |p| -margin(p))?;
    Ok(Selection::flat(top_by_score(scored, budget)))
}

fn proba_scores<F: Fn(&[f64]) -> f64>(
    store: &FeatureStore,
    proba: &[Vec<f64>],
    score: F,
) -> Result<Vec<(f64, SampleId)>> {
    if proba.len() != store.len() {
        return Err(CbsError::DimensionMismatch {
            expected: store.len(),
            found: proba.len(),
            row: None,
        });
    }
    if let Some(p) = proba.iter().find(|p| p.len() < 2) {
        return Err(CbsError::DegenerateClassifier(p.len()));
    }
    Ok(proba
        .iter()
        .zip(store.ids())
        .map(|(p, &id)| (score(p), id))
        .collect())
}

/// k-center greedy: start from the member nearest the pool mean, then keep
/// adding the point farthest from its nearest selected point.
pub fn coreset_select(store: &FeatureStore, budget: usize, _seed: u64) -> Result<Selection> {
    check_budget(store, budget)?;
    Ok(Selection::flat(k_center_greedy(store, budget)))
}

fn k_center_greedy(store: &FeatureStore, budget: usize) -> Vec<SampleId> {
    let n = store.len();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.sort_by_key(|&r| store.id_at(r));
    let mut mean = vec![0.0; store.dim()];
    for (_, v) in store.rows() {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut first = (f64::INFINITY, rows[0]);
    for &r in &rows {
        let d = squared_distance(store.row(r), &mean);
        if d < first.0 {
            first = (d, r);
        }
    }
    let mut selected = vec![first.1];
    let mut taken = vec![false; n];
    taken[first.1] = true;
    let mut nearest: Vec<f64> = (0..n)
        .map(|r| squared_distance(store.row(r), store.row(first.1)))
        .collect();
    while selected.len() < budget {
        let mut best: Option<(f64, usize)> = None;
        for &r in &rows {
            if taken[r] {
                continue;
            }
            if best.is_none_or(|(d, _)| nearest[r] > d) {
                best = Some((nearest[r], r));
            }
        }
        let (_, r) = best.expect("budget <= pool size");
        taken[r] = true;
        selected.push(r);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(store.row(i), store.row(r)));
        }
    }
    selected.into_iter().map(|r| store.id_at(r)).collect()
}

/// Largest distance from any pool point to its nearest selected point.
pub fn covering_radius(store: &FeatureStore, selected: &[SampleId]) -> Result<f64> {
    let chosen: Vec<&[f64]> = selected
        .iter()
        .map(|&id| store.vector(id))
        .collect::<Result<_>>()?;
    Ok(store
        .rows()
        .map(|(_, v)| {
            chosen
                .iter()
                .map(|c| squared_distance(v, c))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max))
}

pub enum Uncertainty {
    Entropy,
    Margin,
}

/// Everything a multi-round uncertainty strategy needs to label and retrain
/// between rounds inside one session.
pub struct RoundContext<'a> {
    pub base: &'a PrototypeClassifier,
    pub buffer: &'a MemoryBuffer,
    pub session_classes: &'a BTreeSet<ClassId>,
    pub oracle: &'a Oracle,
    pub round_size: usize,
    pub seed: u64,
}

/// Rounds of `round_size`: the first round is random (no classifier knows the
/// new classes yet); each later round retrains on the labels gathered so far
/// and picks the most uncertain unlabeled samples. A round falls back to random
/// while fewer than two classes are known.
pub fn multi_round_uncertainty(
    pool: &FeatureStore,
    budget: usize,
    kind: Uncertainty,
    ctx: &RoundContext<'_>,
) -> Result<Selection> {
    check_budget(pool, budget)?;
    if ctx.round_size == 0 {
        return Err(CbsError::InvalidConfig(
            "round_size must be at least 1".into(),
        ));
    }
    let mut chosen: Vec<SampleId> = Vec::with_capacity(budget);
    let mut rounds: Vec<Vec<SampleId>> = Vec::new();
    let no_replay = ReplayParams {
        replay_per_class: 0,
        alpha: 1.0,
    };
    let mut round = 0u64;
    while chosen.len() < budget {
        let take = ctx.round_size.min(budget - chosen.len());
        let taken: BTreeSet<SampleId> = chosen.iter().copied().collect();
        let rest: Vec<SampleId> = pool
            .ids()
            .iter()
            .copied()
            .filter(|id| !taken.contains(id))
            .collect();
        let candidates = pool.subset(&rest)?;

        let labeled: Vec<(SampleId, ClassId)> = chosen
            .iter()
            .map(|&id| Ok((id, ctx.oracle.label(id)?)))
            .collect::<Result<_>>()?;
        let clf = if labeled.is_empty() {
            None
        } else {
            Some(train_session(
                ctx.base,
                ctx.buffer,
                &labeled,
                pool,
                ctx.session_classes,
                &no_replay,
                0,
            )?)
        };
        let picked = match clf.filter(|c| c.classes_seen().len() >= 2) {
            Some(clf) => match kind {
                Uncertainty::Entropy => entropy_select(&candidates, take, &clf)?,
                Uncertainty::Margin => margin_select(&candidates, take, &clf)?,
            },
            None => random_select(
                &candidates,
                take,
                rng::derive_seed(ctx.seed, "round", round),
            )?,
        };
        chosen.extend_from_slice(&picked.ids);
        rounds.push(picked.ids);
        round += 1;
    }
    Ok(Selection {
        ids: chosen,
        per_cluster: rounds,
        discarded: Vec::new(),
    })
}
