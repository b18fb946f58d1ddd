//! Deterministic discrete-event simulation of agents running the
//! retrieve, decide, act loop against either architecture.
//!
//! ```
//! use ctxlake::sim::{run_scenario, ScenarioConfig};
//!
//! let run = run_scenario(&ScenarioConfig::new("warehouse")).unwrap();
//! assert_eq!(run.metrics.decisions, 3);
//! ```

mod runtime;
mod scenarios;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envelope::EnvelopeConfig;
use crate::error::{Error, Result};
use crate::semantic::PrototypeSet;

pub use runtime::{
    run_scenario, Job, Latency, Observation, Observed, Plan, Policy, ReadSpec, Run,
};
pub use scenarios::{
    default_prototypes, primary_lag_key, warehouse_times, FailureVariant, SCENARIOS,
};
pub use schedule::{Schedule, Scheduled};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "contextlake")]
    ContextLake,
    #[serde(rename = "composed")]
    Composed,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ContextLake => "contextlake",
            Mode::Composed => "composed",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextlake" => Ok(Mode::ContextLake),
            "composed" => Ok(Mode::Composed),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Lag knobs understood by the composed baseline. `replica`, `cache`, `index`
/// and `batch` pick the policy of the subsystem holding hot operational state;
/// `lakehouse` is the refresh period of the semantic store.
pub const LAG_KEYS: &[&str] = &["replica", "cache", "index", "batch", "lakehouse"];

/// The subset of [`LAG_KEYS`] that picks the hot-state subsystem.
pub const HOT_LAG_KEYS: &[&str] = &["replica", "cache", "index", "batch"];

pub const DEFAULT_REPLICA_LAG_MS: u64 = 60;
pub const DEFAULT_LAKEHOUSE_PERIOD_MS: u64 = 3_600_000;

/// Scenario config as read from JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_delta_ms")]
    pub delta_ms: u64,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default)]
    pub lags: BTreeMap<String, u64>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admission_control: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<PrototypeSet>,
}

fn default_delta_ms() -> u64 {
    100
}

fn default_max_concurrent() -> usize {
    4
}

impl ScenarioConfig {
    pub fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            mode: Mode::ContextLake,
            delta_ms: default_delta_ms(),
            max_concurrent: default_max_concurrent(),
            lags: BTreeMap::new(),
            seed: 0,
            admission_control: None,
            prototypes: None,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lag(mut self, key: &str, ms: u64) -> Self {
        self.lags.insert(key.to_string(), ms);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn envelope(&self) -> EnvelopeConfig {
        EnvelopeConfig { delta_ms: self.delta_ms, max_concurrent: self.max_concurrent }
    }

    pub fn admission_control(&self) -> bool {
        self.admission_control.unwrap_or(true)
    }

    pub fn lag(&self, key: &str) -> Option<u64> {
        self.lags.get(key).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if !SCENARIOS.contains(&self.scenario.as_str()) {
            return Err(Error::UnknownScenario(self.scenario.clone()));
        }
        self.envelope().validate()?;
        if let Some(key) = self.lags.keys().find(|k| !LAG_KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidConfig(format!("unknown lag key {key:?}; expected one of {LAG_KEYS:?}")));
        }
        let hot = HOT_LAG_KEYS.iter().filter(|k| self.lags.contains_key(**k)).count();
        if hot > 1 {
            return Err(Error::InvalidConfig("at most one of replica, cache, index, batch may be set".into()));
        }
        Ok(())
    }
}
