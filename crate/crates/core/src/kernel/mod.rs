//! Multi-version store addressed by causal cuts.
//!
//! Every commit produces exactly one new [`CutId`]. Cut `k` contains exactly the
//! effects of commits `1..=k`, so a reader holding a cut sees one consistent
//! state of all three layers no matter how many commits land afterwards.
//!
//! Writes are buffered in a [`Transaction`] and stay invisible until commit.
//! [`Kernel::prepare`] moves them into a staging area (still invisible) and
//! hands back a [`PrepareToken`]; [`Kernel::commit`] then publishes the whole
//! write set at a single new cut, or [`Kernel::abort`] drops it without trace.
//!
//! Isolation is snapshot isolation with first-committer-wins: a commit fails
//! with [`Error::WriteConflict`] if any state or semantic key it writes gained
//! a version after the transaction's snapshot. Write skew is possible and is
//! not prevented.
//!
//! The episodic layer is append-only. Appended episodes get sequence keys
//! (`ep:` + zero-padded sequence) assigned at commit, and no episodic key can
//! be overwritten or deleted.
//!
//! Full version history is retained; nothing is garbage collected.

mod clock;
mod episodic_log;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Bound, RangeBounds};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use clock::{Clock, MonotonicClock, SimClock};
pub use episodic_log::{read_episodic_log, EpisodicLine};

use crate::error::{Error, Result};
use episodic_log::EpisodicLogWriter;

/// Commit sequence number identifying one snapshot of the whole store.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CutId(pub u64);

impl fmt::Display for CutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Logical milliseconds from an injected clock.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LogicalTime(pub u64);

impl LogicalTime {
    pub fn since(self, earlier: LogicalTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn plus(self, millis: u64) -> LogicalTime {
        LogicalTime(self.0.saturating_add(millis))
    }
}

impl fmt::Display for LogicalTime {
    /// Formats as a time of day, `HH:MM:SS.mmm`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = self.0 % 1000;
        let s = self.0 / 1000;
        write!(f, "{:02}:{:02}:{:02}.{:03}", s / 3600, (s / 60) % 60, s % 60, ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Episodic,
    Semantic,
    State,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Episodic, Layer::Semantic, Layer::State];
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Episodic => "episodic",
            Layer::Semantic => "semantic",
            Layer::State => "state",
        })
    }
}

/// Key prefix reserved for kernel-assigned episode sequence keys.
pub const EPISODE_KEY_PREFIX: &[u8] = b"ep:";

pub fn episode_key(seq: u64) -> Vec<u8> {
    format!("ep:{seq:020}").into_bytes()
}

pub fn parse_episode_key(key: &[u8]) -> Option<u64> {
    std::str::from_utf8(key.strip_prefix(EPISODE_KEY_PREFIX)?).ok()?.parse().ok()
}

/// One version of one key, valid for cuts in `[valid_from, valid_to)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedEntry {
    pub key: Vec<u8>,
    /// `None` is a tombstone.
    pub value: Option<Vec<u8>>,
    pub layer: Layer,
    pub valid_from: CutId,
    pub valid_to: Option<CutId>,
    pub recorded_at: LogicalTime,
}

#[derive(Debug, Clone)]
struct Version {
    valid_from: CutId,
    value: Option<Vec<u8>>,
    recorded_at: LogicalTime,
    /// Episodic ordinal; zero for the other layers.
    seq: u64,
}

/// An episodic entry as it exists at some cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodicEntry {
    pub seq: u64,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub recorded_at: LogicalTime,
    pub committed_at_cut: CutId,
}

/// A single published write inside a commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedWrite {
    pub layer: Layer,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
}

/// What a transaction observed at its snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedRead {
    pub layer: Layer,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub cut: CutId,
    pub tx_id: u64,
    pub snapshot: CutId,
    pub time: LogicalTime,
    pub reads: Vec<ObservedRead>,
    pub writes: Vec<CommittedWrite>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxStatus {
    Open,
    Prepared,
    Committed,
    Aborted,
}

impl TxStatus {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => TxStatus::Open,
            1 => TxStatus::Prepared,
            2 => TxStatus::Committed,
            _ => TxStatus::Aborted,
        }
    }
}

#[derive(Debug, Clone)]
struct PendingAppend {
    value: Vec<u8>,
    observed_at: LogicalTime,
}

#[derive(Debug, Clone, Default)]
struct WriteSet {
    keyed: BTreeMap<(Layer, Vec<u8>), Option<Vec<u8>>>,
    appends: Vec<PendingAppend>,
}

/// A snapshot-isolated unit of work. Reads resolve against `snapshot` plus the
/// transaction's own writes; writes stay invisible until commit.
#[derive(Debug)]
pub struct Transaction {
    id: u64,
    snapshot: CutId,
    status: Arc<AtomicU8>,
    reads: BTreeMap<(Layer, Vec<u8>), Option<Vec<u8>>>,
    writes: WriteSet,
}

impl Transaction {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn snapshot(&self) -> CutId {
        self.snapshot
    }

    pub fn status(&self) -> TxStatus {
        TxStatus::from_u8(self.status.load(Ordering::SeqCst))
    }

    pub fn read_set(&self) -> impl Iterator<Item = (Layer, &[u8])> {
        self.reads.keys().map(|(l, k)| (*l, k.as_slice()))
    }

    /// Keyed writes in (layer, key) order. Pending appends are not listed.
    pub fn write_set(&self) -> impl Iterator<Item = (Layer, &[u8], Option<&[u8]>)> {
        self.writes.keyed.iter().map(|((l, k), v)| (*l, k.as_slice(), v.as_deref()))
    }

    pub fn pending_appends(&self) -> usize {
        self.writes.appends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writes.keyed.is_empty() && self.writes.appends.is_empty()
    }

    fn ensure_open(&self) -> Result<()> {
        match self.status() {
            TxStatus::Open => Ok(()),
            _ => Err(Error::TxClosed(self.id)),
        }
    }

    fn set_status(&self, status: TxStatus) {
        self.status.store(status as u8, Ordering::SeqCst);
    }
}

/// Handle to a prepared transaction. Consumed by commit or abort.
#[derive(Debug)]
pub struct PrepareToken {
    tx_id: u64,
}

impl PrepareToken {
    pub fn tx_id(&self) -> u64 {
        self.tx_id
    }
}

struct Staged {
    snapshot: CutId,
    status: Arc<AtomicU8>,
    reads: BTreeMap<(Layer, Vec<u8>), Option<Vec<u8>>>,
    writes: WriteSet,
}

/// Checks a state transition `(current, proposed)`; `Err` carries the reason.
pub type Validator = Arc<dyn Fn(Option<&[u8]>, Option<&[u8]>) -> Result<(), String> + Send + Sync>;

#[derive(Default)]
struct Store {
    versions: BTreeMap<(Layer, Vec<u8>), Vec<Version>>,
    latest: CutId,
    commits: Vec<CommitRecord>,
    episodic_count: u64,
}

impl Store {
    fn check_cut(&self, cut: CutId) -> Result<()> {
        if cut > self.latest {
            return Err(Error::UnknownCut { cut, latest: self.latest });
        }
        Ok(())
    }

    fn version_at(versions: &[Version], cut: CutId) -> Option<&Version> {
        let idx = versions.partition_point(|v| v.valid_from <= cut);
        idx.checked_sub(1).map(|i| &versions[i])
    }

    fn get(&self, cut: CutId, layer: Layer, key: &[u8]) -> Option<Vec<u8>> {
        let versions = self.versions.get(&(layer, key.to_vec()))?;
        Self::version_at(versions, cut)?.value.clone()
    }

    fn latest_version(&self, layer: Layer, key: &[u8]) -> Option<&Version> {
        self.versions.get(&(layer, key.to_vec()))?.last()
    }

    fn range<'a>(
        &'a self,
        cut: CutId,
        layer: Layer,
        start: Bound<Vec<u8>>,
        end: Bound<Vec<u8>>,
    ) -> impl Iterator<Item = (&'a [u8], &'a [u8])> + 'a {
        let lower = match start {
            Bound::Included(k) => Bound::Included((layer, k)),
            Bound::Excluded(k) => Bound::Excluded((layer, k)),
            Bound::Unbounded => Bound::Included((layer, Vec::new())),
        };
        self.versions
            .range((lower, Bound::Unbounded))
            .take_while(move |((l, k), _)| {
                *l == layer
                    && match &end {
                        Bound::Included(e) => k <= e,
                        Bound::Excluded(e) => k < e,
                        Bound::Unbounded => true,
                    }
            })
            .filter_map(move |((_, k), versions)| {
                let v = Self::version_at(versions, cut)?;
                v.value.as_deref().map(|value| (k.as_slice(), value))
            })
    }

    fn push(&mut self, layer: Layer, key: Vec<u8>, version: Version) {
        self.versions.entry((layer, key)).or_default().push(version);
    }
}

/// The store. Safe to share across threads; reads never wait on preparation.
pub struct Kernel {
    store: RwLock<Store>,
    staged: Mutex<HashMap<u64, Staged>>,
    next_tx: AtomicU64,
    clock: Arc<dyn Clock>,
    validators: RwLock<Vec<(Vec<u8>, Validator)>>,
    episodic_log: Mutex<Option<EpisodicLogWriter>>,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::new(Arc::new(SimClock::default()))
    }
}

impl Kernel {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            store: RwLock::new(Store::default()),
            staged: Mutex::new(HashMap::new()),
            next_tx: AtomicU64::new(1),
            clock,
            validators: RwLock::new(Vec::new()),
            episodic_log: Mutex::new(None),
        }
    }

    /// Persists every episodic entry committed from now on to `path` (truncating it).
    pub fn attach_episodic_log(&self, path: &Path) -> Result<()> {
        let mut writer = EpisodicLogWriter::create(path)?;
        let store = self.store.read();
        for entry in Self::episodic_entries_in(&store, store.latest) {
            writer.append(&EpisodicLine::new(
                entry.seq,
                entry.recorded_at.0,
                &entry.key,
                &entry.value,
            )?)?;
        }
        *self.episodic_log.lock() = Some(writer);
        Ok(())
    }

    /// Rebuilds a kernel whose episodic layer equals the logged one, one commit per line.
    pub fn replay_episodic(lines: &[EpisodicLine], clock: Arc<dyn Clock>) -> Result<Self> {
        let kernel = Self::new(clock);
        {
            let mut store = kernel.store.write();
            for line in lines {
                let seq = store.episodic_count + 1;
                if line.seq != seq {
                    return Err(Error::Parse {
                        line: seq as usize,
                        message: format!("expected seq {seq}, found {}", line.seq),
                    });
                }
                let key = line.key.clone().into_bytes();
                if store.versions.contains_key(&(Layer::Episodic, key.clone())) {
                    return Err(Error::EpisodicRevision(key));
                }
                let value = line.value()?;
                let cut = CutId(store.latest.0 + 1);
                let time = LogicalTime(line.time_ms);
                store.push(
                    Layer::Episodic,
                    key.clone(),
                    Version { valid_from: cut, value: Some(value.clone()), recorded_at: time, seq },
                );
                store.episodic_count = seq;
                store.latest = cut;
                store.commits.push(CommitRecord {
                    cut,
                    tx_id: 0,
                    snapshot: CutId(cut.0 - 1),
                    time,
                    reads: Vec::new(),
                    writes: vec![CommittedWrite { layer: Layer::Episodic, key, value: Some(value) }],
                });
            }
        }
        Ok(kernel)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> LogicalTime {
        self.clock.now()
    }

    /// The latest committed cut.
    pub fn begin_snapshot(&self) -> CutId {
        self.store.read().latest
    }

    /// Fails with [`Error::UnknownCut`] if `cut` has not been committed yet.
    pub fn check_cut(&self, cut: CutId) -> Result<()> {
        self.store.read().check_cut(cut)
    }

    pub fn read(&self, cut: CutId, layer: Layer, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let store = self.store.read();
        store.check_cut(cut)?;
        Ok(store.get(cut, layer, key))
    }

    /// Live entries of `layer` at `cut` whose keys fall in `range`, in key order.
    pub fn scan<R: RangeBounds<Vec<u8>>>(
        &self,
        cut: CutId,
        layer: Layer,
        range: R,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let store = self.store.read();
        store.check_cut(cut)?;
        Ok(store
            .range(cut, layer, range.start_bound().cloned(), range.end_bound().cloned())
            .map(|(k, v)| (k.to_vec(), v.to_vec()))
            .collect())
    }

    pub fn scan_prefix(
        &self,
        cut: CutId,
        layer: Layer,
        prefix: &[u8],
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.scan_filter(cut, layer, prefix, |_, _| true)
    }

    /// Prefix scan keeping only entries for which `predicate(key, value)` holds at `cut`.
    pub fn scan_filter<F>(
        &self,
        cut: CutId,
        layer: Layer,
        prefix: &[u8],
        mut predicate: F,
    ) -> Result<Vec<(Vec<u8>, Vec<u8>)>>
    where
        F: FnMut(&[u8], &[u8]) -> bool,
    {
        let store = self.store.read();
        store.check_cut(cut)?;
        Ok(store
            .range(cut, layer, Bound::Included(prefix.to_vec()), Bound::Unbounded)
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter(|(k, v)| predicate(k, v))
            .map(|(k, v)| (k.to_vec(), v.to_vec()))
            .collect())
    }

    /// Full version history of one key.
    pub fn history(&self, layer: Layer, key: &[u8]) -> Vec<VersionedEntry> {
        let store = self.store.read();
        let Some(versions) = store.versions.get(&(layer, key.to_vec())) else {
            return Vec::new();
        };
        versions
            .iter()
            .enumerate()
            .map(|(i, v)| VersionedEntry {
                key: key.to_vec(),
                value: v.value.clone(),
                layer,
                valid_from: v.valid_from,
                valid_to: versions.get(i + 1).map(|n| n.valid_from),
                recorded_at: v.recorded_at,
            })
            .collect()
    }

    /// Episodic entries visible at `cut`, in sequence order.
    pub fn episodic_entries(&self, cut: CutId) -> Result<Vec<EpisodicEntry>> {
        let store = self.store.read();
        store.check_cut(cut)?;
        Ok(Self::episodic_entries_in(&store, cut))
    }

    fn episodic_entries_in(store: &Store, cut: CutId) -> Vec<EpisodicEntry> {
        let mut out: Vec<EpisodicEntry> = store
            .versions
            .range((Layer::Episodic, Vec::new())..)
            .take_while(|((l, _), _)| *l == Layer::Episodic)
            .filter_map(|((_, k), versions)| {
                let v = Store::version_at(versions, cut)?;
                Some(EpisodicEntry {
                    seq: v.seq,
                    key: k.clone(),
                    value: v.value.clone()?,
                    recorded_at: v.recorded_at,
                    committed_at_cut: v.valid_from,
                })
            })
            .collect();
        out.sort_by_key(|e| e.seq);
        out
    }

    pub fn episode_count(&self) -> u64 {
        self.store.read().episodic_count
    }

    pub fn commit_record(&self, cut: CutId) -> Option<CommitRecord> {
        let idx = cut.0.checked_sub(1)? as usize;
        self.store.read().commits.get(idx).cloned()
    }

    pub fn commit_log(&self) -> Vec<CommitRecord> {
        self.store.read().commits.clone()
    }

    /// The newest cut whose commit time is at or before `t`.
    pub fn cut_at_time(&self, t: LogicalTime) -> CutId {
        let store = self.store.read();
        let idx = store.commits.partition_point(|c| c.time <= t);
        CutId(idx as u64)
    }

    pub fn commit_time(&self, cut: CutId) -> Option<LogicalTime> {
        self.commit_record(cut).map(|c| c.time)
    }

    /// Registers a check run at commit for every state write whose key starts with `prefix`.
    pub fn register_validator(&self, prefix: &[u8], validator: Validator) {
        self.validators.write().push((prefix.to_vec(), validator));
    }

    /// Evaluates state validators for a transition of `key`.
    pub fn validate_state(
        &self,
        key: &[u8],
        current: Option<&[u8]>,
        proposed: Option<&[u8]>,
    ) -> Result<()> {
        for (prefix, validator) in self.validators.read().iter() {
            if key.starts_with(prefix) {
                validator(current, proposed).map_err(|reason| Error::TransitionRejected {
                    key: key.to_vec(),
                    reason,
                })?;
            }
        }
        Ok(())
    }

    pub fn begin_tx(&self) -> Transaction {
        self.begin_tx_at(self.begin_snapshot()).expect("latest cut is always valid")
    }

    /// Starts a transaction reading from an older cut.
    pub fn begin_tx_at(&self, snapshot: CutId) -> Result<Transaction> {
        self.store.read().check_cut(snapshot)?;
        Ok(Transaction {
            id: self.next_tx.fetch_add(1, Ordering::SeqCst),
            snapshot,
            status: Arc::new(AtomicU8::new(TxStatus::Open as u8)),
            reads: BTreeMap::new(),
            writes: WriteSet::default(),
        })
    }

    pub fn tx_read(
        &self,
        tx: &mut Transaction,
        layer: Layer,
        key: &[u8],
    ) -> Result<Option<Vec<u8>>> {
        tx.ensure_open()?;
        if let Some(own) = tx.writes.keyed.get(&(layer, key.to_vec())) {
            return Ok(own.clone());
        }
        let value = self.store.read().get(tx.snapshot, layer, key);
        tx.reads.insert((layer, key.to_vec()), value.clone());
        Ok(value)
    }

    /// Buffers a write to the state or episodic layer. Semantic writes must go
    /// through a registered transformation.
    pub fn tx_write(
        &self,
        tx: &mut Transaction,
        layer: Layer,
        key: &[u8],
        value: Vec<u8>,
    ) -> Result<()> {
        tx.ensure_open()?;
        match layer {
            Layer::Semantic => {
                Err(Error::UnregisteredTransform("direct semantic write".to_string()))
            }
            Layer::Episodic => {
                if self.store.read().versions.contains_key(&(Layer::Episodic, key.to_vec()))
                    || tx.writes.keyed.contains_key(&(Layer::Episodic, key.to_vec()))
                {
                    return Err(Error::EpisodicRevision(key.to_vec()));
                }
                if key.starts_with(EPISODE_KEY_PREFIX) || std::str::from_utf8(key).is_err() {
                    return Err(Error::ReservedEpisodicKey(key.to_vec()));
                }
                tx.writes.keyed.insert((layer, key.to_vec()), Some(value));
                Ok(())
            }
            Layer::State => {
                tx.writes.keyed.insert((layer, key.to_vec()), Some(value));
                Ok(())
            }
        }
    }

    /// Buffers a tombstone. The episodic layer has no deletion.
    pub fn tx_delete(&self, tx: &mut Transaction, layer: Layer, key: &[u8]) -> Result<()> {
        tx.ensure_open()?;
        match layer {
            Layer::Episodic => Err(Error::EpisodicRevision(key.to_vec())),
            Layer::Semantic => {
                Err(Error::UnregisteredTransform("direct semantic delete".to_string()))
            }
            Layer::State => {
                tx.writes.keyed.insert((layer, key.to_vec()), None);
                Ok(())
            }
        }
    }

    /// Buffers a new episode; its sequence key is assigned at commit.
    pub fn tx_append(
        &self,
        tx: &mut Transaction,
        value: Vec<u8>,
        observed_at: LogicalTime,
    ) -> Result<()> {
        tx.ensure_open()?;
        tx.writes.appends.push(PendingAppend { value, observed_at });
        Ok(())
    }

    /// Semantic write path, reserved for the transformation runner.
    pub(crate) fn tx_write_semantic(
        &self,
        tx: &mut Transaction,
        key: &[u8],
        value: Option<Vec<u8>>,
    ) -> Result<()> {
        tx.ensure_open()?;
        tx.writes.keyed.insert((Layer::Semantic, key.to_vec()), value);
        Ok(())
    }

    /// Drops an open transaction.
    pub fn rollback(&self, tx: &mut Transaction) -> Result<()> {
        tx.ensure_open()?;
        tx.set_status(TxStatus::Aborted);
        Ok(())
    }

    /// Stages the write set. It stays invisible until [`Kernel::commit`].
    pub fn prepare(&self, tx: &mut Transaction) -> Result<PrepareToken> {
        tx.ensure_open()?;
        tx.set_status(TxStatus::Prepared);
        let staged = Staged {
            snapshot: tx.snapshot,
            status: Arc::clone(&tx.status),
            reads: std::mem::take(&mut tx.reads),
            writes: std::mem::take(&mut tx.writes),
        };
        self.staged.lock().insert(tx.id, staged);
        Ok(PrepareToken { tx_id: tx.id })
    }

    pub fn abort(&self, token: PrepareToken) -> Result<()> {
        let staged = self.staged.lock().remove(&token.tx_id).ok_or(Error::TxClosed(token.tx_id))?;
        staged.status.store(TxStatus::Aborted as u8, Ordering::SeqCst);
        Ok(())
    }

    /// Publishes all staged writes at one new cut. On any error the transaction is aborted.
    pub fn commit(&self, token: PrepareToken) -> Result<CutId> {
        let staged = self.staged.lock().remove(&token.tx_id).ok_or(Error::TxClosed(token.tx_id))?;
        let result = self.apply(token.tx_id, &staged);
        let status = if result.is_ok() { TxStatus::Committed } else { TxStatus::Aborted };
        staged.status.store(status as u8, Ordering::SeqCst);
        result
    }

    fn apply(&self, tx_id: u64, staged: &Staged) -> Result<CutId> {
        let mut store = self.store.write();
        for ((layer, key), value) in &staged.writes.keyed {
            match layer {
                Layer::Episodic => {
                    if store.versions.contains_key(&(Layer::Episodic, key.clone())) {
                        return Err(Error::EpisodicRevision(key.clone()));
                    }
                }
                Layer::Semantic | Layer::State => {
                    let current = store.latest_version(*layer, key);
                    if current.is_some_and(|v| v.valid_from > staged.snapshot) {
                        return Err(Error::WriteConflict { layer: *layer, key: key.clone() });
                    }
                    if *layer == Layer::State {
                        let current = current.and_then(|v| v.value.as_deref());
                        self.validate_state(key, current, value.as_deref())?;
                    }
                }
            }
        }

        let cut = CutId(store.latest.0 + 1);
        let time = self.clock.now();
        let mut writes = Vec::with_capacity(staged.writes.keyed.len() + staged.writes.appends.len());
        let mut log_lines = Vec::new();
        for ((layer, key), value) in &staged.writes.keyed {
            let seq = if *layer == Layer::Episodic {
                store.episodic_count += 1;
                log_lines.push(EpisodicLine::new(
                    store.episodic_count,
                    time.0,
                    key,
                    value.as_deref().unwrap_or_default(),
                )?);
                store.episodic_count
            } else {
                0
            };
            store.push(
                *layer,
                key.clone(),
                Version { valid_from: cut, value: value.clone(), recorded_at: time, seq },
            );
            writes.push(CommittedWrite { layer: *layer, key: key.clone(), value: value.clone() });
        }
        for append in &staged.writes.appends {
            store.episodic_count += 1;
            let seq = store.episodic_count;
            let key = episode_key(seq);
            log_lines.push(EpisodicLine::new(seq, append.observed_at.0, &key, &append.value)?);
            store.push(
                Layer::Episodic,
                key.clone(),
                Version {
                    valid_from: cut,
                    value: Some(append.value.clone()),
                    recorded_at: append.observed_at,
                    seq,
                },
            );
            writes.push(CommittedWrite {
                layer: Layer::Episodic,
                key,
                value: Some(append.value.clone()),
            });
        }
        store.latest = cut;
        store.commits.push(CommitRecord {
            cut,
            tx_id,
            snapshot: staged.snapshot,
            time,
            reads: staged
                .reads
                .iter()
                .map(|((layer, key), value)| ObservedRead {
                    layer: *layer,
                    key: key.clone(),
                    value: value.clone(),
                })
                .collect(),
            writes,
        });
        if let Some(log) = self.episodic_log.lock().as_mut() {
            for line in &log_lines {
                log.append(line)?;
            }
        }
        Ok(cut)
    }

    /// Prepare and commit in one step.
    pub fn commit_tx(&self, tx: &mut Transaction) -> Result<CutId> {
        let token = self.prepare(tx)?;
        self.commit(token)
    }

    /// Number of prepared transactions awaiting commit or abort.
    pub fn staged_count(&self) -> usize {
        self.staged.lock().len()
    }
}
