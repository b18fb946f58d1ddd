use std::fmt;

use crate::kernel::{CutId, Layer};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("cut {cut} is beyond the latest committed cut {latest}")]
    UnknownCut { cut: CutId, latest: CutId },
    #[error("transaction {0} is not open")]
    TxClosed(u64),
    #[error("episodic entry {} already exists and cannot be revised", Key(.0))]
    EpisodicRevision(Vec<u8>),
    #[error("sequence keys are assigned at commit; {} cannot be written directly", Key(.0))]
    ReservedEpisodicKey(Vec<u8>),
    #[error("write conflict on {layer}/{}", Key(.key))]
    WriteConflict { layer: Layer, key: Vec<u8> },
    #[error("semantic write without a registered transformation ({0})")]
    UnregisteredTransform(String),
    #[error("source episode {0} does not exist")]
    UnknownSourceEpisode(u64),
    #[error("semantic record {} carries no provenance", Key(.0))]
    MissingProvenance(Vec<u8>),
    #[error("transformation {id} v{version} is already registered")]
    DuplicateVersion { id: String, version: u32 },
    #[error("state transition on {} rejected: {reason}", Key(.key))]
    TransitionRejected { key: Vec<u8>, reason: String },
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("no prototype registered for label {0:?}")]
    UnknownLabel(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("malformed decision {id}: {reason}")]
    MalformedDecision { id: String, reason: String },
    #[error("concurrency envelope exhausted ({limit} decisions in flight)")]
    OverEnvelope { limit: usize },
    #[error("invalid envelope: {0}")]
    InvalidEnvelope(String),
    #[error("unknown subsystem {0:?}")]
    UnknownSubsystem(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{count} state-layer transactions exceed the brute-force limit of {max}")]
    TooManyTransactions { count: usize, max: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

/// Renders a byte-string key as text when it is valid UTF-8.
struct Key<'a>(&'a [u8]);

impl fmt::Display for Key<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(self.0) {
            Ok(s) => write!(f, "{s}"),
            Err(_) => write!(f, "0x{}", self.0.iter().map(|b| format!("{b:02x}")).collect::<String>()),
        }
    }
}
