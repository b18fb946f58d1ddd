//! The three memory layers on top of the kernel.
//!
//! - Episodic: append-only observations. Corrections are new episodes.
//! - Semantic: interpretations, written only by registered transformations and
//!   carrying their provenance.
//! - State: operative conditions, changed through validated transitions.
//!
//! Every commit that touches the state layer also appends a state-transition
//! episode recording the writes, and every commit carrying semantic writes adds
//! an entry to the transformation log. Replaying the episodic log plus the
//! transformation log therefore rebuilds the semantic and state layers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::kernel::{
    parse_episode_key, Clock, CutId, EpisodicLine, Kernel, Layer, LogicalTime, PrepareToken,
    SimClock, Transaction,
};
use crate::semantic::{Embedder, HashEmbedder, Registry};

/// Episode source used for the state-transition record of each state commit.
pub const STATE_TRANSITION_SOURCE: &str = "state-transition";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub seq: u64,
    pub observed_at: LogicalTime,
    pub source: String,
    pub payload: Vec<u8>,
}

impl Episode {
    /// Stored value: `source`, a newline, then the raw payload.
    pub fn encode_value(source: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(source.len() + 1 + payload.len());
        out.extend_from_slice(source.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(payload);
        out
    }

    pub fn decode(seq: u64, observed_at: LogicalTime, value: &[u8]) -> Option<Episode> {
        let split = value.iter().position(|b| *b == b'\n')?;
        let source = std::str::from_utf8(&value[..split]).ok()?.to_string();
        Some(Episode { seq, observed_at, source, payload: value[split + 1..].to_vec() })
    }

    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

/// A versioned interpretation with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticRecord {
    #[serde(skip)]
    pub key: Vec<u8>,
    #[serde(with = "codec::b64")]
    pub interpretation: Vec<u8>,
    pub transform_id: String,
    pub transform_version: u32,
    pub sources: Vec<u64>,
    /// Cut at which this version became visible; derived on read, not stored.
    #[serde(skip)]
    pub produced_at_cut: CutId,
}

impl SemanticRecord {
    pub fn new(
        key: impl Into<Vec<u8>>,
        interpretation: impl Into<Vec<u8>>,
        transform_id: impl Into<String>,
        transform_version: u32,
        sources: Vec<u64>,
    ) -> Self {
        Self {
            key: key.into(),
            interpretation: interpretation.into(),
            transform_id: transform_id.into(),
            transform_version,
            sources,
            produced_at_cut: CutId(0),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("semantic record serializes")
    }

    pub fn decode(key: &[u8], value: &[u8]) -> Result<Self> {
        let mut record: SemanticRecord = serde_json::from_slice(value)
            .map_err(|_| Error::MissingProvenance(key.to_vec()))?;
        record.key = key.to_vec();
        Ok(record)
    }

    pub fn interpretation_text(&self) -> String {
        String::from_utf8_lossy(&self.interpretation).into_owned()
    }

    pub fn has_provenance(&self) -> bool {
        !self.transform_id.is_empty() && !self.sources.is_empty()
    }
}

/// Precondition a state transition checks against the transaction's view.
#[derive(Clone)]
pub enum Expect {
    Any,
    Absent,
    Equals(Vec<u8>),
    /// Current value parses as a decimal integer at least this large.
    AtLeast(i64),
    Matches(Arc<dyn Fn(Option<&[u8]>) -> bool + Send + Sync>),
}

impl Expect {
    pub fn holds(&self, current: Option<&[u8]>) -> bool {
        match self {
            Expect::Any => true,
            Expect::Absent => current.is_none(),
            Expect::Equals(v) => current == Some(v.as_slice()),
            Expect::AtLeast(n) => current.and_then(parse_int).is_some_and(|c| c >= *n),
            Expect::Matches(f) => f(current),
        }
    }

    fn describe(&self) -> String {
        match self {
            Expect::Any => "any".into(),
            Expect::Absent => "absent".into(),
            Expect::Equals(v) => format!("== {}", String::from_utf8_lossy(v)),
            Expect::AtLeast(n) => format!(">= {n}"),
            Expect::Matches(_) => "predicate".into(),
        }
    }
}

impl std::fmt::Debug for Expect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.describe())
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub expect: Expect,
    /// `None` deletes the key.
    pub new_value: Option<Vec<u8>>,
}

impl Transition {
    pub fn set(expect: Expect, value: impl Into<Vec<u8>>) -> Self {
        Self { expect, new_value: Some(value.into()) }
    }
}

pub fn parse_int(v: &[u8]) -> Option<i64> {
    std::str::from_utf8(v).ok()?.trim().parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionWrite {
    #[serde(with = "codec::text")]
    key: Vec<u8>,
    #[serde(with = "codec::b64_opt")]
    value: Option<Vec<u8>>,
}

/// One committed transformation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformLogEntry {
    pub transform_id: String,
    pub version: u32,
    pub input_seqs: Vec<u64>,
    #[serde(with = "codec::text_vec")]
    pub output_keys: Vec<Vec<u8>>,
    pub committed_cut: CutId,
}

pub fn read_transform_log(path: &Path) -> Result<Vec<TransformLogEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

#[derive(Default)]
struct TransformLog {
    entries: Vec<TransformLogEntry>,
    writer: Option<BufWriter<File>>,
}

impl TransformLog {
    fn push(&mut self, entry: TransformLogEntry) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(|e| Error::Io(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Kernel plus layer contracts, transformation registry and embedder.
pub struct ContextLake {
    kernel: Kernel,
    registry: Arc<Registry>,
    embedder: Arc<dyn Embedder>,
    transform_log: Mutex<TransformLog>,
    pending_log: Mutex<HashMap<u64, Vec<TransformLogEntry>>>,
}

impl Default for ContextLake {
    fn default() -> Self {
        Self::new(Arc::new(SimClock::default()))
    }
}

impl ContextLake {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_parts(Kernel::new(clock), Arc::new(Registry::default()), Arc::new(HashEmbedder))
    }

    pub fn with_parts(kernel: Kernel, registry: Arc<Registry>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            kernel,
            registry,
            embedder,
            transform_log: Mutex::new(TransformLog::default()),
            pending_log: Mutex::new(HashMap::new()),
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Persists both logs under `dir` as `episodes.jsonl` and `transforms.jsonl`.
    pub fn attach_logs(&self, dir: &Path) -> Result<()> {
        self.kernel.attach_episodic_log(&dir.join("episodes.jsonl"))?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join("transforms.jsonl"))?;
        let mut log = self.transform_log.lock();
        let mut writer = BufWriter::new(file);
        for entry in &log.entries {
            serde_json::to_writer(&mut writer, entry).map_err(|e| Error::Io(e.to_string()))?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        log.writer = Some(writer);
        Ok(())
    }

    pub fn transform_log(&self) -> Vec<TransformLogEntry> {
        self.transform_log.lock().entries.clone()
    }

    pub fn begin_tx(&self) -> Transaction {
        self.kernel.begin_tx()
    }

    /// Appends one episode in its own transaction and returns its sequence number.
    pub fn append_episode(&self, source: &str, observed_at: LogicalTime, payload: &[u8]) -> Result<u64> {
        let mut tx = self.begin_tx();
        self.stage_episode(&mut tx, source, observed_at, payload)?;
        let cut = self.commit_tx(&mut tx)?;
        let record = self.kernel.commit_record(cut).expect("just committed");
        Ok(record
            .writes
            .iter()
            .filter_map(|w| parse_episode_key(&w.key))
            .next_back()
            .expect("commit carried the appended episode"))
    }

    /// Buffers an episode inside `tx`; its sequence number is assigned at commit.
    pub fn stage_episode(
        &self,
        tx: &mut Transaction,
        source: &str,
        observed_at: LogicalTime,
        payload: &[u8],
    ) -> Result<()> {
        if source.contains('\n') {
            return Err(Error::InvalidConfig(format!("episode source {source:?} contains a newline")));
        }
        self.kernel.tx_append(tx, Episode::encode_value(source, payload), observed_at)
    }

    pub fn episodes(&self, cut: CutId) -> Result<Vec<Episode>> {
        Ok(self
            .kernel
            .episodic_entries(cut)?
            .into_iter()
            .filter(|e| parse_episode_key(&e.key).is_some())
            .filter_map(|e| Episode::decode(e.seq, e.recorded_at, &e.value))
            .collect())
    }

    pub fn episode(&self, cut: CutId, seq: u64) -> Result<Option<Episode>> {
        let key = crate::kernel::episode_key(seq);
        let Some(value) = self.kernel.read(cut, Layer::Episodic, &key)? else {
            return Ok(None);
        };
        let observed_at = self
            .kernel
            .history(Layer::Episodic, &key)
            .first()
            .map(|v| v.recorded_at)
            .unwrap_or_default();
        Ok(Episode::decode(seq, observed_at, &value))
    }

    /// Buffers a semantic record. The record's transformation must be registered
    /// and every source episode must exist at the transaction's snapshot.
    pub fn write_semantic(&self, tx: &mut Transaction, record: &SemanticRecord) -> Result<()> {
        if !self.registry.is_registered(&record.transform_id, record.transform_version) {
            return Err(Error::UnregisteredTransform(format!(
                "{} v{}",
                record.transform_id, record.transform_version
            )));
        }
        if !record.has_provenance() {
            return Err(Error::MissingProvenance(record.key.clone()));
        }
        for seq in &record.sources {
            let key = crate::kernel::episode_key(*seq);
            if self.kernel.read(tx.snapshot(), Layer::Episodic, &key)?.is_none() {
                return Err(Error::UnknownSourceEpisode(*seq));
            }
        }
        self.kernel.tx_write_semantic(tx, &record.key, Some(record.encode()))
    }

    pub fn read_semantic(&self, cut: CutId, key: &[u8]) -> Result<Option<SemanticRecord>> {
        let Some(value) = self.kernel.read(cut, Layer::Semantic, key)? else {
            return Ok(None);
        };
        let mut record = SemanticRecord::decode(key, &value)?;
        record.produced_at_cut = self
            .kernel
            .history(Layer::Semantic, key)
            .into_iter().rfind(|v| v.valid_from <= cut)
            .map(|v| v.valid_from)
            .unwrap_or_default();
        Ok(Some(record))
    }

    pub fn read_state(&self, cut: CutId, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.kernel.read(cut, Layer::State, key)
    }

    pub fn register_state_validator<F>(&self, prefix: &[u8], validator: F)
    where
        F: Fn(Option<&[u8]>, Option<&[u8]>) -> std::result::Result<(), String> + Send + Sync + 'static,
    {
        self.kernel.register_validator(prefix, Arc::new(validator));
    }

    /// Checks the transition against the transaction's view and the validators,
    /// then buffers it. Validators run again at commit against the winning version.
    pub fn update_state(&self, tx: &mut Transaction, key: &[u8], transition: Transition) -> Result<()> {
        let current = self.kernel.tx_read(tx, Layer::State, key)?;
        if !transition.expect.holds(current.as_deref()) {
            return Err(Error::TransitionRejected {
                key: key.to_vec(),
                reason: format!(
                    "expected {} but found {}",
                    transition.expect.describe(),
                    current.as_deref().map(String::from_utf8_lossy).unwrap_or("nothing".into())
                ),
            });
        }
        self.kernel.validate_state(key, current.as_deref(), transition.new_value.as_deref())?;
        match transition.new_value {
            Some(v) => self.kernel.tx_write(tx, Layer::State, key, v),
            None => self.kernel.tx_delete(tx, Layer::State, key),
        }
    }

    pub fn prepare(&self, tx: &mut Transaction) -> Result<PrepareToken> {
        let state_writes: Vec<TransitionWrite> = tx
            .write_set()
            .filter(|(layer, _, _)| *layer == Layer::State)
            .map(|(_, key, value)| TransitionWrite { key: key.to_vec(), value: value.map(<[u8]>::to_vec) })
            .collect();
        if !state_writes.is_empty() {
            let payload = serde_json::to_vec(&state_writes).expect("transition serializes");
            let now = self.kernel.now();
            self.stage_episode(tx, STATE_TRANSITION_SOURCE, now, &payload)?;
        }

        let mut groups: BTreeMap<(String, u32), (BTreeSet<u64>, Vec<Vec<u8>>)> = BTreeMap::new();
        for (layer, key, value) in tx.write_set() {
            if layer != Layer::Semantic {
                continue;
            }
            let Some(value) = value else { continue };
            let record = SemanticRecord::decode(key, value)?;
            let group = groups.entry((record.transform_id, record.transform_version)).or_default();
            group.0.extend(record.sources);
            group.1.push(key.to_vec());
        }
        let entries = groups
            .into_iter()
            .map(|((transform_id, version), (inputs, output_keys))| TransformLogEntry {
                transform_id,
                version,
                input_seqs: inputs.into_iter().collect(),
                output_keys,
                committed_cut: CutId(0),
            })
            .collect::<Vec<_>>();

        let token = self.kernel.prepare(tx)?;
        if !entries.is_empty() {
            self.pending_log.lock().insert(token.tx_id(), entries);
        }
        Ok(token)
    }

    pub fn commit(&self, token: PrepareToken) -> Result<CutId> {
        let tx_id = token.tx_id();
        let result = self.kernel.commit(token);
        let entries = self.pending_log.lock().remove(&tx_id);
        let cut = result?;
        if let Some(entries) = entries {
            let mut log = self.transform_log.lock();
            for mut entry in entries {
                entry.committed_cut = cut;
                log.push(entry)?;
            }
        }
        Ok(cut)
    }

    pub fn abort(&self, token: PrepareToken) -> Result<()> {
        self.pending_log.lock().remove(&token.tx_id());
        self.kernel.abort(token)
    }

    pub fn commit_tx(&self, tx: &mut Transaction) -> Result<CutId> {
        let token = self.prepare(tx)?;
        self.commit(token)
    }

    /// Runs a registered transformation over `input_seqs` and commits its
    /// outputs, retrying on write conflicts.
    pub fn run_transformation(&self, id: &str, version: u32, input_seqs: &[u64]) -> Result<CutId> {
        let transform = self
            .registry
            .get(id, version)
            .ok_or_else(|| Error::UnregisteredTransform(format!("{id} v{version}")))?;
        let mut attempts = 0;
        loop {
            let mut tx = self.begin_tx();
            let mut inputs = Vec::with_capacity(input_seqs.len());
            for seq in input_seqs {
                inputs.push(self.episode(tx.snapshot(), *seq)?.ok_or(Error::UnknownSourceEpisode(*seq))?);
            }
            for out in transform.apply(&inputs) {
                let record = SemanticRecord::new(out.key, out.interpretation, id, version, input_seqs.to_vec());
                self.write_semantic(&mut tx, &record)?;
            }
            match self.commit_tx(&mut tx) {
                Err(Error::WriteConflict { .. }) if attempts < 8 => attempts += 1,
                other => return other,
            }
        }
    }

    /// All live entries of one layer at `cut`.
    pub fn layer_dump(&self, cut: CutId, layer: Layer) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.kernel.scan(cut, layer, ..)
    }

    /// Reconstructs a lake from its episodic log and transformation log. The
    /// registry must hold every transformation named in `transforms`.
    pub fn rebuild(
        episodes: &[EpisodicLine],
        transforms: &[TransformLogEntry],
        registry: Arc<Registry>,
        clock: Arc<dyn Clock>,
    ) -> Result<ContextLake> {
        let kernel = Kernel::replay_episodic(episodes, clock)?;
        let lake = ContextLake::with_parts(kernel, registry, Arc::new(HashEmbedder));
        for line in episodes {
            let Some(seq) = parse_episode_key(line.key.as_bytes()) else { continue };
            let Some(episode) = Episode::decode(seq, LogicalTime(line.time_ms), &line.value()?) else {
                continue;
            };
            if episode.source != STATE_TRANSITION_SOURCE {
                continue;
            }
            let writes: Vec<TransitionWrite> = serde_json::from_slice(&episode.payload)
                .map_err(|e| Error::Parse { line: line.seq as usize, message: e.to_string() })?;
            let mut tx = lake.begin_tx();
            for w in writes {
                match w.value {
                    Some(v) => lake.kernel.tx_write(&mut tx, Layer::State, &w.key, v)?,
                    None => lake.kernel.tx_delete(&mut tx, Layer::State, &w.key)?,
                }
            }
            // Bypass the lake's prepare so no new transition episode is recorded.
            lake.kernel.commit_tx(&mut tx)?;
        }
        for entry in transforms {
            let transform = lake
                .registry
                .get(&entry.transform_id, entry.version)
                .ok_or_else(|| Error::UnregisteredTransform(format!("{} v{}", entry.transform_id, entry.version)))?;
            let mut tx = lake.begin_tx();
            let mut inputs = Vec::with_capacity(entry.input_seqs.len());
            for seq in &entry.input_seqs {
                inputs.push(lake.episode(tx.snapshot(), *seq)?.ok_or(Error::UnknownSourceEpisode(*seq))?);
            }
            for out in transform.apply(&inputs) {
                if !entry.output_keys.contains(&out.key) {
                    continue;
                }
                let record = SemanticRecord::new(
                    out.key,
                    out.interpretation,
                    entry.transform_id.clone(),
                    entry.version,
                    entry.input_seqs.clone(),
                );
                lake.write_semantic(&mut tx, &record)?;
            }
            lake.commit_tx(&mut tx)?;
        }
        Ok(lake)
    }
}
