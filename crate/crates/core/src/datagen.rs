//! Seeded synthetic worlds: Gaussian class blobs projected onto the unit
//! sphere, split into sessions with disjoint class spaces.
//!
//! Geometry: within-class noise is isotropic with unit standard deviation
//! before projection. Class centers sit on a sphere of radius `separation` and
//! are repelled until every pair is at least `separation` apart, so
//! `separation` is the minimum inter-center distance in units of the
//! within-class sigma. Each feature is `center + N(0, I)`, then L2-normalized.
//!
//! Pool sizes follow an exponential long tail inside each session:
//! `n_i = round(head * r^(-i / (C - 1)))` for the i-th class of the session,
//! with `r = imbalance_ratio`, so the head class has `head` samples and the
//! tail class `head / r`. Test sets are balanced.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CbsError, Result};
use crate::features::{norm, squared_distance, FeatureStore};
use crate::protocol::{SessionPlan, SessionSpec};
use crate::rng;
use crate::{ClassId, SampleId};

const REPULSION_ROUNDS: usize = 2000;

fn default_budget() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_sessions: usize,
    pub classes_per_session: usize,
    pub dim: usize,
    /// Pool size of the head class of each session.
    pub pool_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub imbalance_ratio: f64,
    pub seed: u64,
    /// Labeling budget written into the generated plan.
    #[serde(default = "default_budget")]
    pub budget: usize,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CbsError::InvalidConfig(m.to_string()));
        if self.num_sessions == 0
            || self.classes_per_session == 0
            || self.dim == 0
            || self.pool_per_class == 0
            || self.test_per_class == 0
            || self.budget == 0
        {
            return bad("all counts must be at least 1");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad("imbalance_ratio must be at least 1");
        }
        let pool: usize = self.pool_sizes().iter().sum();
        if self.budget > pool {
            return Err(CbsError::InvalidConfig(format!(
                "budget {} exceeds the per-session pool size {pool}",
                self.budget
            )));
        }
        Ok(())
    }

    /// Pool size of each class within one session, head first.
    pub fn pool_sizes(&self) -> Vec<usize> {
        let c = self.classes_per_session;
        (0..c)
            .map(|i| {
                let exponent = if c > 1 {
                    i as f64 / (c - 1) as f64
                } else {
                    0.0
                };
                let n = self.pool_per_class as f64 * self.imbalance_ratio.powf(-exponent);
                (n.round() as usize).max(1)
            })
            .collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: WorldConfig =
            serde_json::from_str(s).map_err(|e| CbsError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CbsError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub store: FeatureStore,
    pub plan: SessionPlan,
    /// Unit direction of each class center, indexed by class id.
    pub centers: Vec<Vec<f64>>,
}

pub fn generate(config: &WorldConfig) -> Result<(FeatureStore, SessionPlan)> {
    let world = generate_world(config)?;
    Ok((world.store, world.plan))
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut r = rng::stream(config.seed, "datagen", 0);
    let classes = config.num_sessions * config.classes_per_session;
    let radius = config.separation;
    let centers = place_centers(classes, config.dim, radius, &mut r)?;

    enum Role {
        Pool,
        Test,
    }
    let mut rows: Vec<(usize, ClassId, Role, Vec<f64>)> = Vec::new();
    let sizes = config.pool_sizes();
    for session in 0..config.num_sessions {
        for (i, &pool_n) in sizes.iter().enumerate() {
            let class = session * config.classes_per_session + i;
            for k in 0..pool_n + config.test_per_class {
                let mut v: Vec<f64> = centers[class]
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        c + z
                    })
                    .collect();
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                let role = if k < pool_n { Role::Pool } else { Role::Test };
                rows.push((session, class as ClassId, role, v));
            }
        }
    }
    rows.shuffle(&mut r);

    let mut sessions: Vec<SessionSpec> = (0..config.num_sessions)
        .map(|s| SessionSpec {
            class_space: (0..config.classes_per_session)
                .map(|i| (s * config.classes_per_session + i) as ClassId)
                .collect(),
            pool_ids: Vec::new(),
            test_ids: Vec::new(),
        })
        .collect();
    let mut store_rows = Vec::with_capacity(rows.len());
    for (id, (session, class, role, v)) in rows.into_iter().enumerate() {
        let id = id as SampleId;
        match role {
            Role::Pool => sessions[session].pool_ids.push(id),
            Role::Test => sessions[session].test_ids.push(id),
        }
        store_rows.push((id, v, Some(class)));
    }
    let store = FeatureStore::from_dense_rows(config.dim, store_rows)?;
    let plan = SessionPlan {
        budget: config.budget,
        seed: config.seed,
        sessions,
    };
    plan.validate()?;
    let centers = centers
        .into_iter()
        .map(|c| c.into_iter().map(|x| x / radius).collect())
        .collect();
    Ok(World {
        store,
        plan,
        centers,
    })
}

/// Uniform directions on the sphere of `radius`, pushed apart pairwise until
/// every distance is at least `radius`.
fn place_centers(count: usize, dim: usize, radius: f64, r: &mut rng::Rng) -> Result<Vec<Vec<f64>>> {
    let project = |v: &mut Vec<f64>| {
        let n = norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x *= radius / n);
        }
    };
    let mut centers: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
            project(&mut v);
            v
        })
        .collect();
    let min_sq = radius * radius;
    for _ in 0..REPULSION_ROUNDS {
        let mut moved = false;
        for a in 0..count {
            for b in a + 1..count {
                let d2 = squared_distance(&centers[a], &centers[b]);
                if d2 >= min_sq {
                    continue;
                }
                moved = true;
                let d = d2.sqrt();
                let push = 0.5 * (radius - d) + 1e-3 * radius;
                let dir: Vec<f64> = if d > 0.0 {
                    centers[a]
                        .iter()
                        .zip(&centers[b])
                        .map(|(x, y)| (x - y) / d)
                        .collect()
                } else {
                    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
                    let n = norm(&v);
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                };
                for k in 0..dim {
                    centers[a][k] += push * dir[k];
                    centers[b][k] -= push * dir[k];
                }
                project(&mut centers[a]);
                project(&mut centers[b]);
            }
        }
        if !moved {
            return Ok(centers);
        }
    }
    Err(CbsError::InfeasibleSeparation {
        classes: count,
        attempts: REPULSION_ROUNDS,
    })
}
