//! Class-balanced sample selection for active class-incremental learning,
//! operating on precomputed feature vectors.
//!
//! A session pool is clustered with k-means into as many groups as the
//! session has classes. Each cluster receives a share of the labeling budget
//! proportional to its size (rounded up), and within a cluster samples are
//! picked greedily so that the Gaussian fitted to the picks stays close, in
//! KL divergence, to the Gaussian of the whole cluster. The overshoot from
//! rounding is discarded at random.
//!
//! Around that core sit baseline strategies, a prototype learner with
//! Gaussian pseudo-feature replay, a multi-session driver with balance and
//! accuracy metrics, a synthetic world generator, and a sweep runner.

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod error;
pub mod features;
pub mod gaussian;
pub mod kmeans;
pub mod learner;
pub mod protocol;
pub mod rng;
pub mod selection;
pub mod sweep;

/// Stable sample identifier; dense in `[0, N)` for a loaded store.
pub type SampleId = u64;
pub type ClassId = u32;

pub use baselines::StrategyKind;
pub use config::RunConfig;
pub use datagen::{generate, WorldConfig};
pub use error::{CbsError, Result};
pub use features::{load_features, save_features, FeatureStore};
pub use gaussian::{kl_divergence, DiagonalGaussian, MomentAccumulator};
pub use kmeans::{kmeans, Clustering, KMeansParams};
pub use learner::{MemoryBuffer, PrototypeClassifier};
pub use protocol::{run, Oracle, RunReport, SessionPlan};
pub use selection::{
    allocate_budget, brute_force_select, cbs_select, greedy_select_cluster, Selection,
};
