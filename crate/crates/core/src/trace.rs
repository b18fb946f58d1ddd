//! Trace events and their JSONL encoding, one event per line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admissibility::{DecisionRecord, Violation};
use crate::codec;
use crate::error::{Error, Result};
use crate::kernel::{CommitRecord, CutId, Layer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Retrieval(Retrieval),
    Decision(Decision),
    Verdict(VerdictEvent),
    Prepare(Prepare),
    Commit(Commit),
    Abort(Abort),
    ExternalAction(ExternalAction),
}

/// One value an agent observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Retrieval {
    pub time_ms: u64,
    pub agent: String,
    /// Set when the read went through a composed subsystem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsystem: Option<String>,
    pub layer: Layer,
    #[serde(with = "codec::text")]
    pub key: Vec<u8>,
    pub cut: CutId,
    #[serde(with = "codec::b64_opt")]
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub time_ms: u64,
    pub latest_cut: CutId,
    pub delta_ms: u64,
    pub record: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictEvent {
    pub time_ms: u64,
    pub decision_id: String,
    pub admitted: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prepare {
    pub time_ms: u64,
    pub tx_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub layer: Layer,
    #[serde(with = "codec::text")]
    pub key: Vec<u8>,
    #[serde(with = "codec::b64_opt")]
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRef {
    pub id: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commit {
    pub time_ms: u64,
    pub tx_id: u64,
    pub cut: CutId,
    pub snapshot: CutId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
    /// Registered transformations that authorized this commit's semantic writes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transforms: Vec<TransformRef>,
    pub reads: Vec<Entry>,
    pub writes: Vec<Entry>,
}

impl Commit {
    pub fn from_record(record: &CommitRecord, decision_id: Option<String>, transforms: Vec<TransformRef>) -> Self {
        Self {
            time_ms: record.time.0,
            tx_id: record.tx_id,
            cut: record.cut,
            snapshot: record.snapshot,
            decision_id,
            transforms,
            reads: record
                .reads
                .iter()
                .map(|r| Entry { layer: r.layer, key: r.key.clone(), value: r.value.clone() })
                .collect(),
            writes: record
                .writes
                .iter()
                .map(|w| Entry { layer: w.layer, key: w.key.clone(), value: w.value.clone() })
                .collect(),
        }
    }

    pub fn touches_state(&self) -> bool {
        self.writes.iter().any(|w| w.layer == Layer::State)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Abort {
    pub time_ms: u64,
    pub tx_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAction {
    pub time_ms: u64,
    pub agent: String,
    pub decision_id: String,
    pub action: String,
}

impl TraceEvent {
    pub fn time_ms(&self) -> u64 {
        match self {
            TraceEvent::Retrieval(e) => e.time_ms,
            TraceEvent::Decision(e) => e.time_ms,
            TraceEvent::Verdict(e) => e.time_ms,
            TraceEvent::Prepare(e) => e.time_ms,
            TraceEvent::Commit(e) => e.time_ms,
            TraceEvent::Abort(e) => e.time_ms,
            TraceEvent::ExternalAction(e) => e.time_ms,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for event in &self.events {
            serde_json::to_writer(&mut out, event).map_err(|e| Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    /// Parses JSONL. Blank lines are skipped; errors carry 1-based line numbers.
    pub fn parse<R: BufRead>(input: R) -> Result<Trace> {
        let mut events = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
            events.push(event);
        }
        Ok(Trace { events })
    }

    pub fn parse_str(text: &str) -> Result<Trace> {
        Self::parse(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Trace> {
        let file = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn commits(&self) -> impl Iterator<Item = &Commit> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Commit(c) => Some(c),
            _ => None,
        })
    }

    pub fn decisions(&self) -> impl Iterator<Item = &Decision> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Decision(d) => Some(d),
            _ => None,
        })
    }

    pub fn retrievals(&self) -> impl Iterator<Item = &Retrieval> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Retrieval(r) => Some(r),
            _ => None,
        })
    }
}
