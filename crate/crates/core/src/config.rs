//! Run configuration: defaults, then a JSON file, then `CBS_*` environment
//! variables, then `--set key=value` flags. Unknown keys are rejected at
//! every layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::DEFAULT_ROUND_SIZE;
use crate::error::{CbsError, Result};
use crate::gaussian::DEFAULT_VAR_FLOOR;
use crate::kmeans::KMeansParams;
use crate::learner::{
    ReplayParams, DEFAULT_REPLAY_ALPHA, DEFAULT_REPLAY_PER_CLASS, DEFAULT_TEMPERATURE,
};
use crate::selection::{SelectionParams, DEFAULT_BRUTE_FORCE_GUARD};

/// Bumped whenever a field is added, removed, or changes meaning.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub const ENV_PREFIX: &str = "CBS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub var_floor: f64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub temperature: f64,
    pub replay_alpha: f64,
    pub replay_per_class: usize,
    pub round_size: usize,
    pub brute_force_guard: u64,
    pub use_unlabeled_distributions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            var_floor: DEFAULT_VAR_FLOOR,
            kmeans_max_iter: KMeansParams::default().max_iter,
            kmeans_tol: KMeansParams::default().tol,
            temperature: DEFAULT_TEMPERATURE,
            replay_alpha: DEFAULT_REPLAY_ALPHA,
            replay_per_class: DEFAULT_REPLAY_PER_CLASS,
            round_size: DEFAULT_ROUND_SIZE,
            brute_force_guard: DEFAULT_BRUTE_FORCE_GUARD,
            use_unlabeled_distributions: false,
        }
    }
}

impl RunConfig {
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CbsError::InvalidConfig(msg));
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return bad(format!(
                "var_floor must be positive, got {}",
                self.var_floor
            ));
        }
        if self.kmeans_max_iter == 0 {
            return bad("kmeans_max_iter must be at least 1".into());
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return bad(format!(
                "kmeans_tol must be non-negative, got {}",
                self.kmeans_tol
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(0.0..=1.0).contains(&self.replay_alpha) {
            return bad(format!(
                "replay_alpha must lie in [0, 1], got {}",
                self.replay_alpha
            ));
        }
        if self.round_size == 0 {
            return bad("round_size must be at least 1".into());
        }
        if self.brute_force_guard == 0 {
            return bad("brute_force_guard must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| CbsError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CbsError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Sets one key from its textual value. Values are parsed as JSON first,
    /// so `true`, `0.1`, and `20` work unquoted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(map) => map,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if !map.contains_key(key) {
            return Err(CbsError::InvalidConfig(format!(
                "unknown config key `{key}`"
            )));
        }
        let parsed =
            serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        let next: RunConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CbsError::InvalidConfig(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// `key=value` form of [`RunConfig::set`].
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CbsError::InvalidConfig(format!("expected key=value, got `{pair}`")))?;
        self.set(key.trim(), value.trim())
    }

    /// Applies `CBS_<KEY>` overrides, e.g. `CBS_TEMPERATURE=0.1`. Any other
    /// `CBS_` variable is an error.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let keys = Self::keys();
        for (name, value) in vars {
            let Some(suffix) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = suffix.to_ascii_lowercase();
            if !keys.contains(&key) {
                return Err(CbsError::InvalidConfig(format!(
                    "unknown environment override `{name}`"
                )));
            }
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            var_floor: self.var_floor,
            kmeans: KMeansParams {
                max_iter: self.kmeans_max_iter,
                tol: self.kmeans_tol,
            },
        }
    }

    pub fn replay_params(&self) -> ReplayParams {
        ReplayParams {
            replay_per_class: self.replay_per_class,
            alpha: self.replay_alpha,
        }
    }
}
