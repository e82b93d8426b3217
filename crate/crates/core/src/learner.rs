//! Prototype classifier standing in for a prompt-tuned model: one unit-norm
//! embedding per class, cosine-softmax predictions, pseudo labels for the
//! unselected pool, per-class Gaussian estimation, and pseudo-feature replay
//! from a buffer of stored class Gaussians.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};
use crate::features::{dot, norm, FeatureStore};
use crate::gaussian::DiagonalGaussian;
use crate::rng;
use crate::{ClassId, SampleId};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_REPLAY_ALPHA: f64 = 0.5;
pub const DEFAULT_REPLAY_PER_CLASS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    dim: usize,
    temperature: f64,
    classes: Vec<ClassId>,
    embeddings: Vec<Vec<f64>>,
}

impl PrototypeClassifier {
    pub fn new(dim: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CbsError::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(PrototypeClassifier {
            dim,
            temperature,
            classes: Vec::new(),
            embeddings: Vec::new(),
        })
    }

    /// Builds a classifier from explicit embeddings; each is normalized.
    pub fn from_embeddings(
        temperature: f64,
        embeddings: impl IntoIterator<Item = (ClassId, Vec<f64>)>,
    ) -> Result<Self> {
        let mut clf: Option<PrototypeClassifier> = None;
        for (class, g) in embeddings {
            let c = match clf.as_mut() {
                Some(c) => c,
                None => clf.insert(PrototypeClassifier::new(g.len(), temperature)?),
            };
            c.add_class(class, &g)?;
        }
        clf.ok_or(CbsError::NoClasses)
    }

    fn add_class(&mut self, class: ClassId, g: &[f64]) -> Result<()> {
        if g.len() != self.dim {
            return Err(CbsError::DimensionMismatch {
                expected: self.dim,
                found: g.len(),
                row: None,
            });
        }
        if self.classes.contains(&class) {
            return Err(CbsError::ClassAlreadySeen(class));
        }
        self.classes.push(class);
        self.embeddings.push(unit(g.to_vec()));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        let mut out = PrototypeClassifier::new(self.dim, temperature)?;
        out.classes = self.classes.clone();
        out.embeddings = self.embeddings.clone();
        Ok(out)
    }

    /// Classes in the order they were learned.
    pub fn classes_seen(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn embedding(&self, class: ClassId) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| self.embeddings[i].as_slice())
    }

    fn cosine(&self, f: &[f64], i: usize) -> f64 {
        let n = norm(f);
        let s = dot(f, &self.embeddings[i]);
        if n > 0.0 {
            s / n
        } else {
            s
        }
    }

    /// Softmax of cosine / τ over `classes_seen`, in that order.
    pub fn predict_proba(&self, f: &[f64]) -> Result<Vec<f64>> {
        if self.classes.is_empty() {
            return Err(CbsError::NoClasses);
        }
        let logits: Vec<f64> = (0..self.classes.len())
            .map(|i| self.cosine(f, i) / self.temperature)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Highest-cosine class among `candidates` (all seen classes when `None`),
    /// lowest class id on ties. Argmax of the softmax, independent of τ.
    fn argmax_within(&self, f: &[f64], candidates: Option<&BTreeSet<ClassId>>) -> Option<ClassId> {
        let mut best: Option<(f64, ClassId)> = None;
        for (i, &c) in self.classes.iter().enumerate() {
            if candidates.is_some_and(|set| !set.contains(&c)) {
                continue;
            }
            let s = self.cosine(f, i);
            let better = match best {
                None => true,
                Some((b, bc)) => s > b || (s == b && c < bc),
            };
            if better {
                best = Some((s, c));
            }
        }
        best.map(|(_, c)| c)
    }

    pub fn predict(&self, f: &[f64]) -> Result<ClassId> {
        self.argmax_within(f, None).ok_or(CbsError::NoClasses)
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Argmax label over `allowed` for every row of `store`.
pub fn pseudo_label(
    clf: &PrototypeClassifier,
    store: &FeatureStore,
    allowed: &BTreeSet<ClassId>,
) -> Result<BTreeMap<SampleId, ClassId>> {
    if allowed.is_empty() {
        return Err(CbsError::EmptyAllowedSet);
    }
    if let Some(&c) = allowed.iter().find(|c| !clf.classes.contains(c)) {
        return Err(CbsError::EmptyClass(c));
    }
    store
        .rows()
        .map(|(id, f)| {
            let c = clf
                .argmax_within(f, Some(allowed))
                .ok_or(CbsError::EmptyAllowedSet)?;
            Ok((id, c))
        })
        .collect()
}

/// Per-class Gaussian over labeled plus pseudo-labeled members. Labeled
/// vectors come first, so an empty `pseudo` gives exactly the labeled-only fit.
pub fn estimate_class_distributions(
    labeled: &[(SampleId, ClassId)],
    pseudo: &[(SampleId, ClassId)],
    store: &FeatureStore,
    classes: &BTreeSet<ClassId>,
    var_floor: f64,
) -> Result<BTreeMap<ClassId, DiagonalGaussian>> {
    let mut members: BTreeMap<ClassId, Vec<&[f64]>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for &(id, c) in labeled.iter().chain(pseudo) {
        if let Some(list) = members.get_mut(&c) {
            list.push(store.vector(id)?);
        }
    }
    members
        .into_iter()
        .map(|(c, vs)| {
            if vs.is_empty() {
                return Err(CbsError::EmptyClass(c));
            }
            Ok((
                c,
                DiagonalGaussian::estimate(vs.iter().copied(), var_floor)?,
            ))
        })
        .collect()
}

/// Stored Gaussians for every class of every completed session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub distributions: BTreeMap<ClassId, DiagonalGaussian>,
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, session: BTreeMap<ClassId, DiagonalGaussian>) {
        self.distributions.extend(session);
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.distributions.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.distributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distributions.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayParams {
    pub replay_per_class: usize,
    /// Weight kept on the previous embedding when blending in replayed features.
    pub alpha: f64,
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams {
            replay_per_class: DEFAULT_REPLAY_PER_CLASS,
            alpha: DEFAULT_REPLAY_ALPHA,
        }
    }
}

/// One session of training. New classes get the normalized mean of their
/// labeled features; each old class with a stored Gaussian is pulled toward
/// the mean of `replay_per_class` pseudo-features drawn from it.
pub fn train_session(
    clf: &PrototypeClassifier,
    buffer: &MemoryBuffer,
    labeled: &[(SampleId, ClassId)],
    store: &FeatureStore,
    session_classes: &BTreeSet<ClassId>,
    replay: &ReplayParams,
    seed: u64,
) -> Result<PrototypeClassifier> {
    if labeled.is_empty() {
        return Err(CbsError::EmptyInput);
    }
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for &(id, c) in labeled {
        if !session_classes.contains(&c) {
            return Err(CbsError::LabelOutsideSessionSpace { id, label: c });
        }
        if clf.classes.contains(&c) {
            return Err(CbsError::ClassAlreadySeen(c));
        }
        let f = store.vector(id)?;
        let entry = sums.entry(c).or_insert_with(|| (vec![0.0; f.len()], 0));
        entry.0.iter_mut().zip(f).for_each(|(s, x)| *s += x);
        entry.1 += 1;
    }

    let mut next = clf.clone();
    if let Some(k) = NonZeroUsize::new(replay.replay_per_class) {
        let mut r = rng::Rng::seed_from_u64(seed);
        for (i, class) in clf.classes.iter().enumerate() {
            let Some(g) = buffer.distributions.get(class) else {
                continue;
            };
            let draws = g.sample(k, &mut r);
            let mut mean = vec![0.0; clf.dim];
            for v in &draws {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
            }
            let replayed = unit(mean);
            let blended: Vec<f64> = clf.embeddings[i]
                .iter()
                .zip(&replayed)
                .map(|(p, q)| replay.alpha * p + (1.0 - replay.alpha) * q)
                .collect();
            if norm(&blended) > 0.0 {
                next.embeddings[i] = unit(blended);
            }
        }
    }
    for (c, (sum, n)) in sums {
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
        next.add_class(c, &mean)?;
    }
    Ok(next)
}
