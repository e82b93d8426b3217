//! The multi-session driver: select, label through the oracle, train, estimate
//! class Gaussians for the buffer, evaluate on every class seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    balanced_random_select, coreset_select, multi_round_uncertainty, random_select, RoundContext,
    StrategyKind, Uncertainty,
};
use crate::config::{RunConfig, CONFIG_SCHEMA_VERSION};
use crate::error::{CbsError, Result};
use crate::features::FeatureStore;
use crate::gaussian::{kl_divergence, DiagonalGaussian};
use crate::learner::{
    estimate_class_distributions, pseudo_label, train_session, MemoryBuffer, PrototypeClassifier,
};
use crate::rng;
use crate::selection::{cbs_select, Selection};
use crate::{ClassId, SampleId};

/// True labels, available only to labeling, reference strategies, and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    labels: BTreeMap<SampleId, ClassId>,
}

impl Oracle {
    /// Reads every label present in `store`.
    pub fn from_store(store: &FeatureStore) -> Result<Oracle> {
        let labels: BTreeMap<_, _> = (0..store.len())
            .filter_map(|row| store.hidden_label(row).map(|c| (store.id_at(row), c)))
            .collect();
        Ok(Oracle { labels })
    }

    pub fn from_labels(labels: BTreeMap<SampleId, ClassId>) -> Oracle {
        Oracle { labels }
    }

    pub fn label(&self, id: SampleId) -> Result<ClassId> {
        self.labels
            .get(&id)
            .copied()
            .ok_or(CbsError::MissingLabel(id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub class_space: Vec<ClassId>,
    pub pool_ids: Vec<SampleId>,
    pub test_ids: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlan {
    pub budget: usize,
    pub seed: u64,
    pub sessions: Vec<SessionSpec>,
}

impl SessionPlan {
    /// Disjoint class spaces, disjoint pool/test ids, and `B <= |pool|`.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CbsError::InvalidPlan(msg));
        if self.sessions.is_empty() {
            return bad("plan has no sessions".into());
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        let mut classes = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for (t, s) in self.sessions.iter().enumerate() {
            if s.class_space.is_empty() {
                return bad(format!("session {t} has an empty class space"));
            }
            for &c in &s.class_space {
                if !classes.insert(c) {
                    return bad(format!("class {c} appears in more than one session"));
                }
            }
            if s.pool_ids.len() < self.budget {
                return bad(format!(
                    "session {t}: budget {} exceeds pool size {}",
                    self.budget,
                    s.pool_ids.len()
                ));
            }
            if s.pool_ids.len() < s.class_space.len() {
                return bad(format!("session {t}: fewer pool samples than classes"));
            }
            for &id in s.pool_ids.iter().chain(&s.test_ids) {
                if !ids.insert(id) {
                    return bad(format!(
                        "sample {id} appears more than once across pools and tests"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: SessionPlan = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CbsError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: usize,
    pub accuracy: f64,
    /// Accuracy on test samples of earlier sessions; absent in the first session.
    pub old_class_accuracy: Option<f64>,
    pub new_class_accuracy: f64,
    pub selected_ids: Vec<SampleId>,
    pub per_class_counts: BTreeMap<ClassId, usize>,
    /// `null` when some class got no samples (the ratio is infinite).
    pub imbalance_ratio: Option<f64>,
    pub undiscovered_class: bool,
    pub discovery_ratio: f64,
    pub per_class_kl: BTreeMap<ClassId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub strategy: StrategyKind,
    pub budget: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub per_session: Vec<SessionReport>,
    pub avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timestamp removed; identical runs give identical bytes.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.generated_at = None;
        copy.to_json()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CbsError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn stamp_now(&mut self) {
        self.generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }
}

/// Largest class count over the smallest; infinite when a class got nothing.
pub fn imbalance_ratio(per_class_counts: &BTreeMap<ClassId, usize>) -> f64 {
    let max = per_class_counts.values().copied().max().unwrap_or(0);
    let min = per_class_counts.values().copied().min().unwrap_or(0);
    if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    }
}

/// Fraction of classes with at least one selected sample.
pub fn discovery_ratio(per_class_counts: &BTreeMap<ClassId, usize>) -> f64 {
    if per_class_counts.is_empty() {
        return 0.0;
    }
    let hit = per_class_counts.values().filter(|&&n| n > 0).count();
    hit as f64 / per_class_counts.len() as f64
}

/// Selected-sample counts for every class of `class_space`, zeros included.
pub fn per_class_counts(
    selected: &[SampleId],
    class_space: &[ClassId],
    oracle: &Oracle,
) -> Result<BTreeMap<ClassId, usize>> {
    let mut counts: BTreeMap<ClassId, usize> = class_space.iter().map(|&c| (c, 0)).collect();
    for &id in selected {
        let c = oracle.label(id)?;
        *counts.entry(c).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Per class, `KL(all pool members of c || selected members of c)`. Classes
/// with nothing selected are left out.
pub fn selected_vs_full_kl(
    selected: &[SampleId],
    pool: &FeatureStore,
    oracle: &Oracle,
    var_floor: f64,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut full: BTreeMap<ClassId, Vec<&[f64]>> = BTreeMap::new();
    for (id, v) in pool.rows() {
        full.entry(oracle.label(id)?).or_default().push(v);
    }
    let mut chosen: BTreeMap<ClassId, Vec<&[f64]>> = BTreeMap::new();
    for &id in selected {
        chosen
            .entry(oracle.label(id)?)
            .or_default()
            .push(pool.vector(id)?);
    }
    let mut out = BTreeMap::new();
    for (c, vs) in chosen {
        let reference = DiagonalGaussian::estimate(full[&c].iter().copied(), var_floor)?;
        let fit = DiagonalGaussian::estimate(vs.iter().copied(), var_floor)?;
        out.insert(c, kl_divergence(&reference, &fit)?);
    }
    Ok(out)
}

/// Top-1 accuracy over the test store.
pub fn evaluate(clf: &PrototypeClassifier, test: &FeatureStore, oracle: &Oracle) -> Result<f64> {
    if test.is_empty() {
        return Err(CbsError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for (id, f) in test.rows() {
        if clf.predict(f)? == oracle.label(id)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Everything one strategy needs to pick a session's samples.
pub struct SessionContext<'a> {
    pub pool: &'a FeatureStore,
    pub class_space: &'a BTreeSet<ClassId>,
    pub budget: usize,
    pub seed: u64,
    pub session: u64,
    pub config: &'a RunConfig,
    pub classifier: &'a PrototypeClassifier,
    pub buffer: &'a MemoryBuffer,
    pub oracle: &'a Oracle,
}

pub fn select_for_session(strategy: StrategyKind, ctx: &SessionContext<'_>) -> Result<Selection> {
    let stream = rng::derive_seed(ctx.seed, strategy.as_str(), ctx.session);
    match strategy {
        StrategyKind::Cbs => Ok(cbs_select(
            ctx.pool,
            ctx.class_space.len(),
            ctx.budget,
            ctx.seed,
            ctx.session,
            &ctx.config.selection_params(),
        )?
        .selection),
        StrategyKind::Random => random_select(ctx.pool, ctx.budget, stream),
        StrategyKind::BalancedRandom => {
            balanced_random_select(ctx.pool, ctx.budget, stream, ctx.oracle)
        }
        StrategyKind::Coreset => coreset_select(ctx.pool, ctx.budget, stream),
        StrategyKind::Entropy | StrategyKind::Margin => {
            let kind = if strategy == StrategyKind::Entropy {
                Uncertainty::Entropy
            } else {
                Uncertainty::Margin
            };
            multi_round_uncertainty(
                ctx.pool,
                ctx.budget,
                kind,
                &RoundContext {
                    base: ctx.classifier,
                    buffer: ctx.buffer,
                    session_classes: ctx.class_space,
                    oracle: ctx.oracle,
                    round_size: ctx.config.round_size,
                    seed: stream,
                },
            )
        }
    }
}

/// Final state of a run, for callers that want to persist the buffer.
pub struct RunOutput {
    pub report: RunReport,
    pub classifier: PrototypeClassifier,
    pub buffer: MemoryBuffer,
}

pub fn run(
    plan: &SessionPlan,
    store: &FeatureStore,
    strategy: StrategyKind,
    config: &RunConfig,
) -> Result<RunReport> {
    run_with_state(plan, store, strategy, config).map(|o| o.report)
}

pub fn run_with_state(
    plan: &SessionPlan,
    store: &FeatureStore,
    strategy: StrategyKind,
    config: &RunConfig,
) -> Result<RunOutput> {
    plan.validate()?;
    config.validate()?;
    let oracle = Oracle::from_store(store)?;
    let store = if store.is_normalized() {
        store.clone()
    } else {
        store.l2_normalize()?
    };
    let mut clf = PrototypeClassifier::new(store.dim(), config.temperature)?;
    let mut buffer = MemoryBuffer::new();
    let mut sessions = Vec::with_capacity(plan.sessions.len());
    let mut old_tests: Vec<SampleId> = Vec::new();

    for (t, spec) in plan.sessions.iter().enumerate() {
        let wrap = |e: CbsError| CbsError::Session {
            session: t,
            source: Box::new(e),
        };
        let report = run_session(
            t,
            spec,
            plan.budget,
            plan.seed,
            &store,
            &oracle,
            config,
            strategy,
            &mut clf,
            &mut buffer,
            &old_tests,
        )
        .map_err(wrap)?;
        sessions.push(report);
        old_tests.extend_from_slice(&spec.test_ids);
    }

    let avg = sessions.iter().map(|s| s.accuracy).sum::<f64>() / sessions.len() as f64;
    Ok(RunOutput {
        report: RunReport {
            schema_version: CONFIG_SCHEMA_VERSION,
            strategy,
            budget: plan.budget,
            seed: plan.seed,
            config: config.clone(),
            per_session: sessions,
            avg,
            generated_at: None,
        },
        classifier: clf,
        buffer,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_session(
    t: usize,
    spec: &SessionSpec,
    budget: usize,
    seed: u64,
    store: &FeatureStore,
    oracle: &Oracle,
    config: &RunConfig,
    strategy: StrategyKind,
    clf: &mut PrototypeClassifier,
    buffer: &mut MemoryBuffer,
    old_tests: &[SampleId],
) -> Result<SessionReport> {
    let session = t as u64;
    let class_space: BTreeSet<ClassId> = spec.class_space.iter().copied().collect();
    let pool = store.subset(&spec.pool_ids)?;
    for &id in spec.pool_ids.iter().chain(&spec.test_ids) {
        let c = oracle.label(id)?;
        if !class_space.contains(&c) {
            return Err(CbsError::LabelOutsideSessionSpace { id, label: c });
        }
    }

    let selection = select_for_session(
        strategy,
        &SessionContext {
            pool: &pool,
            class_space: &class_space,
            budget,
            seed,
            session,
            config,
            classifier: clf,
            buffer,
            oracle,
        },
    )?;

    let labeled: Vec<(SampleId, ClassId)> = selection
        .ids
        .iter()
        .map(|&id| Ok((id, oracle.label(id)?)))
        .collect::<Result<_>>()?;
    let trained = train_session(
        clf,
        buffer,
        &labeled,
        &pool,
        &class_space,
        &config.replay_params(),
        rng::derive_seed(seed, "replay", session),
    )?;

    let counts = per_class_counts(&selection.ids, &spec.class_space, oracle)?;
    let discovered: BTreeSet<ClassId> = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&c, _)| c)
        .collect();

    let pseudo: Vec<(SampleId, ClassId)> = if config.use_unlabeled_distributions {
        let chosen: BTreeSet<SampleId> = selection.ids.iter().copied().collect();
        let remainder: Vec<SampleId> = spec
            .pool_ids
            .iter()
            .copied()
            .filter(|id| !chosen.contains(id))
            .collect();
        if remainder.is_empty() {
            Vec::new()
        } else {
            pseudo_label(&trained, &pool.subset(&remainder)?, &discovered)?
                .into_iter()
                .collect()
        }
    } else {
        Vec::new()
    };
    let distributions =
        estimate_class_distributions(&labeled, &pseudo, &pool, &discovered, config.var_floor)?;
    buffer.update(distributions);
    *clf = trained;

    let new_tests = store.subset(&spec.test_ids)?;
    let mut all_ids = old_tests.to_vec();
    all_ids.extend_from_slice(&spec.test_ids);
    let accuracy = evaluate(clf, &store.subset(&all_ids)?, oracle)?;
    let new_class_accuracy = evaluate(clf, &new_tests, oracle)?;
    let old_class_accuracy = if old_tests.is_empty() {
        None
    } else {
        Some(evaluate(clf, &store.subset(old_tests)?, oracle)?)
    };

    let ratio = imbalance_ratio(&counts);
    Ok(SessionReport {
        session: t,
        accuracy,
        old_class_accuracy,
        new_class_accuracy,
        per_class_kl: selected_vs_full_kl(&selection.ids, &pool, oracle, config.var_floor)?,
        selected_ids: selection.ids,
        imbalance_ratio: ratio.is_finite().then_some(ratio),
        undiscovered_class: !ratio.is_finite(),
        discovery_ratio: discovery_ratio(&counts),
        per_class_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(v: &[usize]) -> BTreeMap<ClassId, usize> {
        v.iter()
            .enumerate()
            .map(|(c, &n)| (c as ClassId, n))
            .collect()
    }

    #[test]
    fn imbalance_examples() {
        assert_eq!(imbalance_ratio(&counts(&[5, 5, 5, 5])), 1.0);
        assert_eq!(imbalance_ratio(&counts(&[10, 2])), 5.0);
        assert!(imbalance_ratio(&counts(&[7, 0])).is_infinite());
    }

    #[test]
    fn discovery_examples() {
        assert_eq!(discovery_ratio(&counts(&[1, 2, 3])), 1.0);
        assert_eq!(discovery_ratio(&counts(&[1, 0, 4, 0])), 0.5);
    }

    fn labeled_store(rows: &[(f64, f64, ClassId)]) -> FeatureStore {
        FeatureStore::from_rows(
            2,
            rows.iter()
                .enumerate()
                .map(|(i, &(x, y, c))| (i as SampleId, vec![x, y], Some(c))),
        )
        .unwrap()
        .l2_normalize()
        .unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let store = labeled_store(&[(1.0, 0.1, 0), (1.0, -0.1, 0), (0.1, 1.0, 1)]);
        let oracle = Oracle::from_store(&store).unwrap();
        let always_zero =
            PrototypeClassifier::from_embeddings(0.07, vec![(0, vec![1.0, 0.0])]).unwrap();
        let zeros = store.subset(&[0, 1]).unwrap();
        assert_eq!(evaluate(&always_zero, &zeros, &oracle).unwrap(), 1.0);
        let perfect = PrototypeClassifier::from_embeddings(
            0.07,
            vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])],
        )
        .unwrap();
        assert_eq!(evaluate(&perfect, &store, &oracle).unwrap(), 1.0);
        assert!(matches!(
            evaluate(&perfect, &store.subset(&[]).unwrap(), &oracle),
            Err(CbsError::EmptyTestSet)
        ));
    }

    #[test]
    fn kl_of_full_selection_is_zero() {
        let store = labeled_store(&[(1.0, 0.1, 0), (1.0, -0.2, 0), (0.1, 1.0, 1), (-0.3, 1.0, 1)]);
        let oracle = Oracle::from_store(&store).unwrap();
        let kl = selected_vs_full_kl(store.ids(), &store, &oracle, 1e-6).unwrap();
        assert_eq!(kl.len(), 2);
        assert!(kl.values().all(|v| v.abs() < 1e-9));

        let single = selected_vs_full_kl(&[0], &store, &oracle, 1e-6).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[&0].is_finite() && single[&0] > 0.0);
    }

    #[test]
    fn plan_validation() {
        let plan = SessionPlan {
            budget: 2,
            seed: 0,
            sessions: vec![
                SessionSpec {
                    class_space: vec![0, 1],
                    pool_ids: vec![0, 1, 2],
                    test_ids: vec![3],
                },
                SessionSpec {
                    class_space: vec![1, 2],
                    pool_ids: vec![4, 5],
                    test_ids: vec![6],
                },
            ],
        };
        assert!(matches!(plan.validate(), Err(CbsError::InvalidPlan(_))));
        let mut ok = plan.clone();
        ok.sessions[1].class_space = vec![2, 3];
        ok.validate().unwrap();
        let mut overlap = ok.clone();
        overlap.sessions[1].pool_ids = vec![3, 5];
        assert!(overlap.validate().is_err());
        let mut small = ok.clone();
        small.budget = 3;
        assert!(small.validate().is_err());
        assert!(
            SessionPlan::from_json(r#"{"budget":1,"seed":0,"sessions":[],"extra":1}"#).is_err()
        );
    }

    #[test]
    fn full_supervision_on_separable_world() {
        let store = labeled_store(&[
            (1.0, 0.1, 0),
            (1.0, -0.1, 0),
            (0.9, 0.0, 0),
            (0.1, 1.0, 1),
            (-0.1, 1.0, 1),
            (0.0, 0.9, 1),
            (1.0, 0.05, 0),
            (0.05, 1.0, 1),
        ]);
        let plan = SessionPlan {
            budget: 6,
            seed: 3,
            sessions: vec![SessionSpec {
                class_space: vec![0, 1],
                pool_ids: (0..6).collect(),
                test_ids: vec![6, 7],
            }],
        };
        for strategy in StrategyKind::ALL {
            let report = run(&plan, &store, strategy, &RunConfig::default()).unwrap();
            assert_eq!(report.per_session[0].accuracy, 1.0, "{strategy}");
            assert_eq!(report.avg, 1.0);
        }
    }
}
