//! Temporal and concurrency envelopes.
//!
//! `delta_ms` bounds the age of every premise at decision time (strictly:
//! age < delta). `max_concurrent` bounds the number of decisions in flight.
//! Slots beyond the bound are refused immediately with
//! [`Error::OverEnvelope`]; there is no queue, since waiting would eat into the
//! decision window.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::admissibility::Verdict;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub delta_ms: u64,
    pub max_concurrent: usize,
}

impl EnvelopeConfig {
    pub fn new(delta_ms: u64, max_concurrent: usize) -> Result<Self> {
        let cfg = Self { delta_ms, max_concurrent };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_ms < 1 {
            return Err(Error::InvalidEnvelope("delta_ms must be at least 1".into()));
        }
        if self.max_concurrent < 1 {
            return Err(Error::InvalidEnvelope("max_concurrent must be at least 1".into()));
        }
        Ok(())
    }

    /// True when `age_ms` is inside the window.
    pub fn admits_age(&self, age_ms: u64) -> bool {
        age_ms < self.delta_ms
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeMetrics {
    pub decisions: u64,
    pub admitted: u64,
    pub premise_ages_ms: Vec<u64>,
    pub retrieval_latencies_ms: Vec<u64>,
    pub rejections_by_violation: BTreeMap<String, u64>,
    pub over_envelope: u64,
    pub slots_granted: u64,
    pub peak_in_flight: usize,
}

impl EnvelopeMetrics {
    pub fn max_premise_age_ms(&self) -> Option<u64> {
        self.premise_ages_ms.iter().copied().max()
    }
}

#[derive(Debug)]
struct Inner {
    limit: Option<usize>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    metrics: Mutex<EnvelopeMetrics>,
}

impl Inner {
    fn release(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Admission control plus envelope bookkeeping. Cheap to clone; clones share state.
#[derive(Debug, Clone)]
pub struct EnvelopeController {
    config: EnvelopeConfig,
    inner: Arc<Inner>,
}

/// An in-flight decision. Dropping the slot releases it.
#[derive(Debug)]
pub struct Slot {
    inner: Arc<Inner>,
    agent_id: String,
}

impl Slot {
    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        self.inner.release();
    }
}

impl EnvelopeController {
    /// Admission control enforced at `config.max_concurrent`.
    pub fn new(config: EnvelopeConfig) -> Self {
        Self::build(config, Some(config.max_concurrent))
    }

    /// Tracks metrics but never refuses a slot.
    pub fn without_admission_control(config: EnvelopeConfig) -> Self {
        Self::build(config, None)
    }

    fn build(config: EnvelopeConfig, limit: Option<usize>) -> Self {
        Self {
            config,
            inner: Arc::new(Inner {
                limit,
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                metrics: Mutex::new(EnvelopeMetrics::default()),
            }),
        }
    }

    pub fn config(&self) -> EnvelopeConfig {
        self.config
    }

    pub fn admission_control(&self) -> bool {
        self.inner.limit.is_some()
    }

    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.load(Ordering::SeqCst)
    }

    pub fn acquire_slot(&self, agent_id: &str) -> Result<Slot> {
        let inner = &self.inner;
        let mut current = inner.in_flight.load(Ordering::SeqCst);
        loop {
            if let Some(limit) = inner.limit {
                if current >= limit {
                    inner.metrics.lock().over_envelope += 1;
                    return Err(Error::OverEnvelope { limit });
                }
            }
            match inner.in_flight.compare_exchange(current, current + 1, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => break,
                Err(actual) => current = actual,
            }
        }
        inner.peak.fetch_max(current + 1, Ordering::SeqCst);
        inner.metrics.lock().slots_granted += 1;
        Ok(Slot { inner: Arc::clone(inner), agent_id: agent_id.to_string() })
    }

    pub fn release_slot(&self, slot: Slot) {
        drop(slot);
    }

    pub fn record_retrieval_latency(&self, latency_ms: u64) {
        self.inner.metrics.lock().retrieval_latencies_ms.push(latency_ms);
    }

    pub fn record_decision(&self, premise_ages_ms: &[u64], verdict: Option<&Verdict>) {
        let mut m = self.inner.metrics.lock();
        m.decisions += 1;
        m.premise_ages_ms.extend_from_slice(premise_ages_ms);
        match verdict {
            Some(v) if !v.admitted => {
                for violation in &v.violations {
                    *m.rejections_by_violation.entry(violation.to_string()).or_default() += 1;
                }
            }
            _ => m.admitted += 1,
        }
    }

    pub fn snapshot_metrics(&self) -> EnvelopeMetrics {
        let mut m = self.inner.metrics.lock().clone();
        m.peak_in_flight = self.inner.peak.load(Ordering::SeqCst);
        m
    }
}
