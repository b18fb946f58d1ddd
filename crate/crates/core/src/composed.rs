//! A mock composition of independently advancing subsystems.
//!
//! Each subsystem exposes one layer of a hidden ground-truth lake, but decides
//! on its own schedule which cut a read observes. None of them can stage a
//! write invisibly: writes go straight to the primary and surface in each
//! subsystem whenever its policy gets there.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analyzer::{analyze, Code};
use crate::error::{Error, Result};
use crate::kernel::{CutId, Layer, LogicalTime};
use crate::layers::ContextLake;
use crate::semantic::{EmbeddingVector, SearchHit};
use crate::sim::{primary_lag_key, run_scenario, Mode, ScenarioConfig, HOT_LAG_KEYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagKind {
    ReplicaLag,
    IndexRefresh,
    CacheTtl,
    BatchRefresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagPolicy {
    pub kind: LagKind,
    pub parameter_ms: u64,
}

impl LagPolicy {
    pub fn replica_lag(ms: u64) -> Self {
        Self { kind: LagKind::ReplicaLag, parameter_ms: ms }
    }

    pub fn index_refresh(period_ms: u64) -> Self {
        Self { kind: LagKind::IndexRefresh, parameter_ms: period_ms }
    }

    pub fn cache_ttl(ttl_ms: u64) -> Self {
        Self { kind: LagKind::CacheTtl, parameter_ms: ttl_ms }
    }

    pub fn batch_refresh(period_ms: u64) -> Self {
        Self { kind: LagKind::BatchRefresh, parameter_ms: period_ms }
    }

    pub fn immediate() -> Self {
        Self::replica_lag(0)
    }

    /// Time up to which everything committed is visible at `now`. Cache TTL
    /// has no single horizon; `now - ttl` is the conservative bound.
    pub fn horizon(&self, now: LogicalTime) -> LogicalTime {
        let p = self.parameter_ms;
        if p == 0 {
            return now;
        }
        let tick = now.0 / p * p;
        LogicalTime(match self.kind {
            LagKind::ReplicaLag | LagKind::CacheTtl => now.0.saturating_sub(p),
            LagKind::IndexRefresh => tick,
            LagKind::BatchRefresh => tick.saturating_sub(p),
        })
    }
}

/// A value as served by a subsystem, with the cut it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedRead {
    pub value: Option<Vec<u8>>,
    pub cut: CutId,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    read: ComposedRead,
    expires_at: LogicalTime,
}

#[derive(Debug, Clone)]
struct Subsystem {
    layer: Layer,
    policy: LagPolicy,
    cache: BTreeMap<Vec<u8>, CacheEntry>,
}

pub struct ComposedView {
    primary: Arc<ContextLake>,
    subsystems: BTreeMap<String, Subsystem>,
}

impl ComposedView {
    pub fn new(primary: Arc<ContextLake>) -> Self {
        Self { primary, subsystems: BTreeMap::new() }
    }

    pub fn with_subsystem(mut self, name: &str, layer: Layer, policy: LagPolicy) -> Self {
        self.add_subsystem(name, layer, policy);
        self
    }

    pub fn add_subsystem(&mut self, name: &str, layer: Layer, policy: LagPolicy) {
        self.subsystems.insert(name.to_string(), Subsystem { layer, policy, cache: BTreeMap::new() });
    }

    /// The hidden ground truth. Agents in composed mode never read through this.
    pub fn primary(&self) -> &Arc<ContextLake> {
        &self.primary
    }

    pub fn subsystem_names(&self) -> impl Iterator<Item = &str> {
        self.subsystems.keys().map(String::as_str)
    }

    pub fn layer_of(&self, subsystem: &str) -> Result<Layer> {
        Ok(self.get(subsystem)?.layer)
    }

    pub fn policy_of(&self, subsystem: &str) -> Result<LagPolicy> {
        Ok(self.get(subsystem)?.policy)
    }

    fn get(&self, name: &str) -> Result<&Subsystem> {
        self.subsystems.get(name).ok_or_else(|| Error::UnknownSubsystem(name.to_string()))
    }

    /// The cut a non-caching subsystem serves at `now`.
    pub fn visible_cut(&self, subsystem: &str, now: LogicalTime) -> Result<CutId> {
        let s = self.get(subsystem)?;
        Ok(self.primary.kernel().cut_at_time(s.policy.horizon(now)))
    }

    pub fn composed_read(&mut self, subsystem: &str, key: &[u8], now: LogicalTime) -> Result<Option<Vec<u8>>> {
        Ok(self.composed_read_at(subsystem, key, now)?.value)
    }

    pub fn composed_read_at(&mut self, subsystem: &str, key: &[u8], now: LogicalTime) -> Result<ComposedRead> {
        let s = self.get(subsystem)?;
        let (layer, policy) = (s.layer, s.policy);
        if policy.kind != LagKind::CacheTtl {
            let cut = self.visible_cut(subsystem, now)?;
            let value = self.primary.kernel().read(cut, layer, key)?;
            return Ok(ComposedRead { value, cut });
        }
        let kernel = self.primary.kernel();
        let s = self.subsystems.get_mut(subsystem).expect("checked above");
        if let Some(entry) = s.cache.get(key) {
            if now < entry.expires_at {
                return Ok(entry.read.clone());
            }
        }
        let cut = kernel.cut_at_time(now);
        let read = ComposedRead { value: kernel.read(cut, layer, key)?, cut };
        if policy.parameter_ms > 0 {
            s.cache.insert(key.to_vec(), CacheEntry { read: read.clone(), expires_at: now.plus(policy.parameter_ms) });
        }
        Ok(read)
    }

    /// Entries under `prefix` as the subsystem serves them at `now`.
    pub fn composed_scan(
        &self,
        subsystem: &str,
        prefix: &[u8],
        now: LogicalTime,
    ) -> Result<(CutId, Vec<(Vec<u8>, Vec<u8>)>)> {
        let layer = self.layer_of(subsystem)?;
        let cut = self.visible_cut(subsystem, now)?;
        Ok((cut, self.primary.kernel().scan_prefix(cut, layer, prefix)?))
    }

    /// Similarity search over a semantic subsystem as of its visible cut.
    pub fn composed_search(
        &self,
        subsystem: &str,
        query: &EmbeddingVector,
        k: usize,
        now: LogicalTime,
    ) -> Result<Vec<SearchHit>> {
        let cut = self.visible_cut(subsystem, now)?;
        self.primary.similarity_search(cut, query, k)
    }

    /// Blind autocommit of one state write to the primary.
    pub fn write_state(&self, key: &[u8], value: Option<Vec<u8>>) -> Result<CutId> {
        let kernel = self.primary.kernel();
        let mut tx = kernel.begin_tx();
        match value {
            Some(v) => kernel.tx_write(&mut tx, Layer::State, key, v)?,
            None => kernel.tx_delete(&mut tx, Layer::State, key)?,
        }
        self.primary.commit_tx(&mut tx)
    }

    /// Reads every subsystem as of one event-time cut: the oldest horizon
    /// among them. Coherent, but only about the past.
    pub fn event_time_read(&self, subsystem: &str, key: &[u8], now: LogicalTime) -> Result<ComposedRead> {
        let layer = self.layer_of(subsystem)?;
        let cut = self.event_time_cut(now);
        Ok(ComposedRead { value: self.primary.kernel().read(cut, layer, key)?, cut })
    }

    pub fn event_time_cut(&self, now: LogicalTime) -> CutId {
        let watermark = self.subsystems.values().map(|s| s.policy.horizon(now)).min().unwrap_or(now);
        self.primary.kernel().cut_at_time(watermark)
    }
}

/// One sweep point of [`run_comparison`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub lag_ms: u64,
    pub seed: u64,
    pub violations: usize,
    pub invalid_outcomes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub lag_key: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,lag_ms,seed,violations,invalid_outcomes\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.mode, r.lag_ms, r.seed, r.violations, r.invalid_outcomes));
        }
        out
    }

    pub fn rows_for(&self, mode: Mode) -> impl Iterator<Item = &ComparisonRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }
}

/// Runs `base` in both modes for every (lag, seed) pair, applying the lag
/// to the scenario's primary lag knob, and analyzes each trace.
pub fn run_comparison(base: &ScenarioConfig, lags: &[u64], seeds: &[u64]) -> Result<ComparisonReport> {
    if lags.is_empty() {
        return Err(Error::InvalidConfig("lag grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    base.validate()?;
    let lag_key = primary_lag_key(&base.scenario);
    let mut rows = Vec::with_capacity(2 * lags.len() * seeds.len());
    for mode in [Mode::Composed, Mode::ContextLake] {
        for &lag_ms in lags {
            for &seed in seeds {
                let mut config = base.clone().with_mode(mode).with_seed(seed);
                if HOT_LAG_KEYS.contains(&lag_key) {
                    config.lags.retain(|k, _| !HOT_LAG_KEYS.contains(&k.as_str()));
                }
                config.lags.insert(lag_key.to_string(), lag_ms);
                let run = run_scenario(&config)?;
                let report = analyze(&run.trace);
                rows.push(ComparisonRow {
                    mode,
                    lag_ms,
                    seed,
                    violations: report.violation_count(),
                    invalid_outcomes: report.count(Code::InvalidOutcome),
                });
            }
        }
    }
    Ok(ComparisonReport { scenario: base.scenario.clone(), lag_key: lag_key.to_string(), rows })
}
