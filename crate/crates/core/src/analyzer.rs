//! Offline trace checker.
//!
//! Rebuilds the store by replaying the trace's commit events, then recomputes
//! every decision's admissibility from raw events, independently of the
//! runtime gate, and looks for history anomalies.
//!
//! | code                       | meaning                                                          |
//! |----------------------------|------------------------------------------------------------------|
//! | `InvalidOutcome`           | a decision took effect on a premise that differed from the latest cut |
//! | `GateDisagreement`         | the runtime verdict differs from the recomputed one              |
//! | `EffectOfRejectedDecision` | a rejected decision still produced a commit or external action   |
//! | `UnrecordedPremise`        | a premise has no matching retrieval event                        |
//! | `NonAtomicVisibility`      | a read exposed part of a multi-write commit at an earlier cut    |
//! | `RetrievalMismatch`        | a read disagrees with the replayed store at its cut              |
//! | `NonMonotoneCut`           | commit cuts are not dense and increasing                         |
//! | `LostUpdate`               | two concurrent commits wrote the same non-episodic key           |
//!
//! plus the four admissibility codes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::admissibility::{PremiseKind, Violation};
use crate::error::{Error, Result};
use crate::kernel::{CutId, Layer};
use crate::layers::SemanticRecord;
use crate::trace::{Commit, Decision, Trace, TraceEvent};

/// Upper bound for the brute-force serializability oracle (6! orders).
pub const MAX_SERIAL_TX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Code {
    PrivatePremise,
    MixedCut,
    StalePremise,
    ImplicitSemantics,
    InvalidOutcome,
    GateDisagreement,
    EffectOfRejectedDecision,
    UnrecordedPremise,
    NonAtomicVisibility,
    RetrievalMismatch,
    NonMonotoneCut,
    LostUpdate,
}

impl Code {
    pub fn as_str(&self) -> &'static str {
        match self {
            Code::PrivatePremise => "PrivatePremise",
            Code::MixedCut => "MixedCut",
            Code::StalePremise => "StalePremise",
            Code::ImplicitSemantics => "ImplicitSemantics",
            Code::InvalidOutcome => "InvalidOutcome",
            Code::GateDisagreement => "GateDisagreement",
            Code::EffectOfRejectedDecision => "EffectOfRejectedDecision",
            Code::UnrecordedPremise => "UnrecordedPremise",
            Code::NonAtomicVisibility => "NonAtomicVisibility",
            Code::RetrievalMismatch => "RetrievalMismatch",
            Code::NonMonotoneCut => "NonMonotoneCut",
            Code::LostUpdate => "LostUpdate",
        }
    }

    fn is_history_anomaly(&self) -> bool {
        matches!(
            self,
            Code::NonAtomicVisibility | Code::RetrievalMismatch | Code::NonMonotoneCut | Code::LostUpdate
        )
    }
}

impl From<Violation> for Code {
    fn from(v: Violation) -> Self {
        match v {
            Violation::PrivatePremise => Code::PrivatePremise,
            Violation::MixedCut => Code::MixedCut,
            Violation::StalePremise => Code::StalePremise,
            Violation::ImplicitSemantics => Code::ImplicitSemantics,
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: Code,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_id: Option<String>,
    pub time_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub decisions: usize,
    pub admitted: usize,
    pub violations_by_code: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub summary: Summary,
    pub details: Vec<Finding>,
}

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.details.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.details.len()
    }

    pub fn count(&self, code: Code) -> usize {
        self.details.iter().filter(|f| f.code == code).count()
    }

    pub fn codes_for(&self, decision_id: &str) -> Vec<Code> {
        self.details.iter().filter(|f| f.decision_id.as_deref() == Some(decision_id)).map(|f| f.code).collect()
    }
}

/// The store as reconstructed from commit events.
struct History<'a> {
    commits: Vec<&'a Commit>,
    versions: HashMap<(Layer, Vec<u8>), Vec<(CutId, Option<Vec<u8>>, usize)>>,
    latest: CutId,
}

impl<'a> History<'a> {
    fn replay(trace: &'a Trace, findings: &mut Vec<Finding>) -> Self {
        let mut h = History { commits: Vec::new(), versions: HashMap::new(), latest: CutId(0) };
        for commit in trace.commits() {
            if commit.cut.0 != h.latest.0 + 1 || commit.snapshot >= commit.cut {
                findings.push(Finding {
                    code: Code::NonMonotoneCut,
                    decision_id: commit.decision_id.clone(),
                    time_ms: commit.time_ms,
                    detail: format!("commit at cut {} (snapshot {}) follows cut {}", commit.cut, commit.snapshot, h.latest),
                });
                continue;
            }
            let idx = h.commits.len();
            h.commits.push(commit);
            for w in &commit.writes {
                h.versions.entry((w.layer, w.key.clone())).or_default().push((commit.cut, w.value.clone(), idx));
            }
            h.latest = commit.cut;
        }
        h
    }

    fn version(&self, cut: CutId, layer: Layer, key: &[u8]) -> Option<&(CutId, Option<Vec<u8>>, usize)> {
        let versions = self.versions.get(&(layer, key.to_vec()))?;
        let idx = versions.partition_point(|(c, _, _)| *c <= cut);
        idx.checked_sub(1).map(|i| &versions[i])
    }

    fn get(&self, cut: CutId, layer: Layer, key: &[u8]) -> Option<&[u8]> {
        self.version(cut, layer, key)?.1.as_deref()
    }

    /// True if a multi-write commit later than `cut` wrote exactly `value` to `key`.
    fn leaked_from_later_commit(&self, layer: Layer, key: &[u8], cut: CutId, value: Option<&[u8]>) -> bool {
        self.versions.get(&(layer, key.to_vec())).is_some_and(|vs| {
            vs.iter().any(|(c, v, idx)| *c > cut && v.as_deref() == value && self.commits[*idx].writes.len() >= 2)
        })
    }

    fn check_read(&self, layer: Layer, key: &[u8], cut: CutId, claimed: Option<&[u8]>) -> Option<(Code, String)> {
        let shown = String::from_utf8_lossy(key);
        if cut > self.latest {
            return Some((Code::RetrievalMismatch, format!("{layer}/{shown} read at unknown cut {cut}")));
        }
        let actual = self.get(cut, layer, key);
        if actual == claimed {
            return None;
        }
        let code = if self.leaked_from_later_commit(layer, key, cut, claimed) {
            Code::NonAtomicVisibility
        } else {
            Code::RetrievalMismatch
        };
        Some((code, format!("{layer}/{shown} at cut {cut}: observed {}, store has {}", render(claimed), render(actual))))
    }

    fn semantic_is_registered(&self, layer: Layer, key: &[u8], cut: CutId) -> Option<bool> {
        let (_, value, idx) = self.version(cut, layer, key)?;
        let value = value.as_deref()?;
        if layer != Layer::Semantic {
            return Some(false);
        }
        let Ok(record) = SemanticRecord::decode(key, value) else { return Some(false) };
        let authorized = self.commits[*idx]
            .transforms
            .iter()
            .any(|t| t.id == record.transform_id && t.version == record.transform_version);
        Some(record.has_provenance() && authorized)
    }
}

fn render(v: Option<&[u8]>) -> String {
    match v {
        Some(bytes) => format!("{:?}", String::from_utf8_lossy(bytes)),
        None => "nothing".into(),
    }
}

fn history_findings(trace: &Trace) -> (Vec<Finding>, bool) {
    let mut findings = Vec::new();
    let history = History::replay(trace, &mut findings);
    for r in trace.retrievals() {
        if let Some((code, detail)) = history.check_read(r.layer, &r.key, r.cut, r.value.as_deref()) {
            findings.push(Finding { code, decision_id: None, time_ms: r.time_ms, detail: format!("{}: {detail}", r.agent) });
        }
    }
    for c in &history.commits {
        for read in &c.reads {
            if let Some((code, detail)) = history.check_read(read.layer, &read.key, c.snapshot, read.value.as_deref()) {
                findings.push(Finding {
                    code,
                    decision_id: c.decision_id.clone(),
                    time_ms: c.time_ms,
                    detail: format!("tx {}: {detail}", c.tx_id),
                });
            }
        }
    }
    // Commits are indexed by cut - 1, so the ones concurrent with `c` are
    // exactly those between its snapshot and its own cut.
    for (i, c) in history.commits.iter().enumerate() {
        let first = (c.snapshot.0 as usize).min(i);
        for earlier in &history.commits[first..i] {
            let overlap = c.writes.iter().find(|w| {
                w.layer != Layer::Episodic && earlier.writes.iter().any(|e| e.layer == w.layer && e.key == w.key)
            });
            if let Some(w) = overlap {
                findings.push(Finding {
                    code: Code::LostUpdate,
                    decision_id: c.decision_id.clone(),
                    time_ms: c.time_ms,
                    detail: format!(
                        "tx {} (snapshot {}) and tx {} (cut {}) both wrote {}/{}",
                        c.tx_id,
                        c.snapshot,
                        earlier.tx_id,
                        earlier.cut,
                        w.layer,
                        String::from_utf8_lossy(&w.key)
                    ),
                });
            }
        }
    }
    let anomalous = findings.iter().any(|f| f.code.is_history_anomaly());
    (findings, anomalous)
}

/// Recomputes the four admissibility conditions for one decision.
fn recompute(d: &Decision, history: &History) -> Vec<Violation> {
    let r = &d.record;
    let mut out = Vec::new();
    if r.shared_effects && (r.opaque_context_declared || r.premises.iter().any(|p| p.cut > d.latest_cut)) {
        out.push(Violation::PrivatePremise);
    }
    if r.premises.iter().map(|p| p.cut).collect::<BTreeSet<_>>().len() > 1 {
        out.push(Violation::MixedCut);
    }
    if r.premises.iter().any(|p| r.decided_at.0.saturating_sub(p.retrieved_at.0) >= d.delta_ms) {
        out.push(Violation::StalePremise);
    }
    let implicit = r.premises.iter().any(|p| {
        p.kind == PremiseKind::Semantic && history.semantic_is_registered(p.layer, &p.key, p.cut) == Some(false)
    });
    if implicit {
        out.push(Violation::ImplicitSemantics);
    }
    out
}

fn describe(v: Violation, d: &Decision) -> String {
    let r = &d.record;
    match v {
        Violation::PrivatePremise if r.opaque_context_declared => format!("{} declared opaque context", r.agent_id),
        Violation::PrivatePremise => format!("{} cited a cut beyond the latest ({})", r.agent_id, d.latest_cut),
        Violation::MixedCut => {
            let cuts: BTreeSet<u64> = r.premises.iter().map(|p| p.cut.0).collect();
            format!("{} drew premises from cuts {cuts:?}", r.agent_id)
        }
        Violation::StalePremise => {
            let age = r.premise_ages_ms().into_iter().max().unwrap_or(0);
            format!("{} acted on a premise {age} ms old with delta {} ms", r.agent_id, d.delta_ms)
        }
        Violation::ImplicitSemantics => format!("{} cited a semantic value without registered provenance", r.agent_id),
    }
}

/// Checks a whole trace.
pub fn analyze(trace: &Trace) -> ViolationReport {
    let (mut details, _) = history_findings(trace);
    let mut scratch = Vec::new();
    let history = History::replay(trace, &mut scratch);

    type RetrievalKey<'t> = (&'t str, Layer, &'t [u8], CutId, u64);
    let mut observed: HashMap<RetrievalKey, Option<&[u8]>> = HashMap::new();
    for r in trace.retrievals() {
        observed.insert((r.agent.as_str(), r.layer, r.key.as_slice(), r.cut, r.time_ms), r.value.as_deref());
    }
    let mut runtime: HashMap<&str, (bool, &[Violation])> = HashMap::new();
    let mut effected: BTreeSet<&str> = BTreeSet::new();
    for event in &trace.events {
        match event {
            TraceEvent::Verdict(v) => {
                runtime.insert(v.decision_id.as_str(), (v.admitted, v.violations.as_slice()));
            }
            TraceEvent::Commit(c) => {
                if let Some(id) = &c.decision_id {
                    effected.insert(id.as_str());
                }
            }
            TraceEvent::ExternalAction(a) => {
                effected.insert(a.decision_id.as_str());
            }
            _ => {}
        }
    }

    let mut summary = Summary::default();
    for d in trace.decisions() {
        let id = d.record.decision_id.as_str();
        let finding = |code: Code, detail: String| Finding {
            code,
            decision_id: Some(id.to_string()),
            time_ms: d.time_ms,
            detail,
        };
        summary.decisions += 1;
        let violations = recompute(d, &history);
        if violations.is_empty() {
            summary.admitted += 1;
        }
        for v in &violations {
            details.push(finding(Code::from(*v), describe(*v, d)));
        }
        if let Some((admitted, runtime_violations)) = runtime.get(id) {
            if *admitted != violations.is_empty() || *runtime_violations != violations.as_slice() {
                details.push(finding(
                    Code::GateDisagreement,
                    format!("runtime {runtime_violations:?}, recomputed {violations:?}"),
                ));
            }
            if !admitted && effected.contains(id) {
                details.push(finding(Code::EffectOfRejectedDecision, "rejected decision produced effects".into()));
            }
        }

        let mut stale_keys = Vec::new();
        for p in &d.record.premises {
            let key = (d.record.agent_id.as_str(), p.layer, p.key.as_slice(), p.cut, p.retrieved_at.0);
            let Some(seen) = observed.get(&key) else {
                details.push(finding(
                    Code::UnrecordedPremise,
                    format!("{}/{} at cut {} has no retrieval event", p.layer, String::from_utf8_lossy(&p.key), p.cut),
                ));
                continue;
            };
            if effected.contains(id) && d.latest_cut <= history.latest && history.get(d.latest_cut, p.layer, &p.key) != *seen {
                stale_keys.push(format!(
                    "{} observed {} but latest cut {} has {}",
                    String::from_utf8_lossy(&p.key),
                    render(*seen),
                    d.latest_cut,
                    render(history.get(d.latest_cut, p.layer, &p.key))
                ));
            }
        }
        if !stale_keys.is_empty() {
            details.push(finding(Code::InvalidOutcome, stale_keys.join("; ")));
        }
    }
    for f in &details {
        *summary.violations_by_code.entry(f.code.to_string()).or_default() += 1;
    }
    ViolationReport { summary, details }
}

/// Brute-force view serializability over the trace's state-layer
/// transactions: true iff some serial order reproduces every recorded
/// state read and the final state. Any history anomaly makes it false.
pub fn check_serializable(trace: &Trace, max_tx: usize) -> Result<bool> {
    let txs: Vec<&Commit> = trace
        .commits()
        .filter(|c| c.touches_state() || c.reads.iter().any(|r| r.layer == Layer::State))
        .collect();
    if txs.len() > max_tx.min(MAX_SERIAL_TX) {
        return Err(Error::TooManyTransactions { count: txs.len(), max: max_tx.min(MAX_SERIAL_TX) });
    }
    let (_, anomalous) = history_findings(trace);
    if anomalous {
        return Ok(false);
    }
    let apply = |state: &mut BTreeMap<Vec<u8>, Vec<u8>>, tx: &Commit| {
        for w in tx.writes.iter().filter(|w| w.layer == Layer::State) {
            match &w.value {
                Some(v) => state.insert(w.key.clone(), v.clone()),
                None => state.remove(&w.key),
            };
        }
    };
    let mut target = BTreeMap::new();
    for tx in &txs {
        apply(&mut target, tx);
    }
    let n = txs.len();
    Ok(txs.iter().permutations(n).any(|order| {
        let mut state = BTreeMap::new();
        for tx in order {
            let reads_match = tx
                .reads
                .iter()
                .filter(|r| r.layer == Layer::State)
                .all(|r| state.get(&r.key).map(Vec::as_slice) == r.value.as_deref());
            if !reads_match {
                return false;
            }
            apply(&mut state, tx);
        }
        state == target
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissibility::{DecisionRecord, Effect, PremiseRef};
    use crate::kernel::LogicalTime;
    use crate::trace::{Entry, Retrieval};

    fn commit(cut: u64, reads: Vec<(&str, Option<&str>)>, writes: Vec<(&str, Option<&str>)>) -> TraceEvent {
        let entry = |(k, v): (&str, Option<&str>)| Entry {
            layer: Layer::State,
            key: k.as_bytes().to_vec(),
            value: v.map(|v| v.as_bytes().to_vec()),
        };
        TraceEvent::Commit(Commit {
            time_ms: cut,
            tx_id: cut,
            cut: CutId(cut),
            snapshot: CutId(cut - 1),
            decision_id: None,
            transforms: Vec::new(),
            reads: reads.into_iter().map(entry).collect(),
            writes: writes.into_iter().map(entry).collect(),
        })
    }

    fn decision(cuts: &[u64]) -> TraceEvent {
        TraceEvent::Decision(Decision {
            time_ms: 10,
            latest_cut: CutId(5),
            delta_ms: 100,
            record: DecisionRecord {
                decision_id: "d".into(),
                agent_id: "a".into(),
                premises: cuts
                    .iter()
                    .map(|c| PremiseRef {
                        layer: Layer::State,
                        key: format!("k{c}").into_bytes(),
                        cut: CutId(*c),
                        retrieved_at: LogicalTime(10),
                        kind: PremiseKind::Base,
                    })
                    .collect(),
                opaque_context_declared: false,
                decided_at: LogicalTime(10),
                effects: vec![Effect::External { action: "x".into() }],
                shared_effects: true,
            },
        })
    }

    fn retrieval(cut: u64, value: Option<&str>) -> TraceEvent {
        TraceEvent::Retrieval(Retrieval {
            time_ms: 10,
            agent: "a".into(),
            subsystem: None,
            layer: Layer::State,
            key: format!("k{cut}").into_bytes(),
            cut: CutId(cut),
            value: value.map(|v| v.as_bytes().to_vec()),
        })
    }

    fn five_commits() -> Vec<TraceEvent> {
        (1..=5).map(|c| commit(c, vec![], vec![("filler", Some("x"))])).collect()
    }

    #[test]
    fn empty_trace_empty_report() {
        let report = analyze(&Trace::default());
        assert!(report.is_clean());
        assert_eq!(report.summary, Summary::default());
        assert!(check_serializable(&Trace::default(), 6).unwrap());
    }

    #[test]
    fn premises_at_cuts_4_and_5_are_one_mixed_cut() {
        let mut events = five_commits();
        events.extend([retrieval(4, None), retrieval(5, None), decision(&[4, 5])]);
        let report = analyze(&Trace { events });
        assert_eq!(report.count(Code::MixedCut), 1, "{report:?}");
        assert_eq!(report.violation_count(), 1);
        assert_eq!(report.summary.decisions, 1);
        assert_eq!(report.summary.admitted, 0);
    }

    #[test]
    fn missing_retrieval_is_unrecorded() {
        let mut events = five_commits();
        events.push(decision(&[5]));
        let report = analyze(&Trace { events });
        assert_eq!(report.codes_for("d"), vec![Code::UnrecordedPremise]);
    }

    #[test]
    fn gate_disagreement_is_reported() {
        let mut events = five_commits();
        events.extend([retrieval(4, None), retrieval(5, None), decision(&[4, 5])]);
        events.push(TraceEvent::Verdict(crate::trace::VerdictEvent {
            time_ms: 10,
            decision_id: "d".into(),
            admitted: true,
            violations: vec![],
        }));
        let report = analyze(&Trace { events });
        assert_eq!(report.count(Code::GateDisagreement), 1);
    }

    #[test]
    fn cut_gaps_are_anomalies() {
        let events = vec![commit(1, vec![], vec![("a", Some("1"))]), commit(3, vec![], vec![("a", Some("2"))])];
        let trace = Trace { events };
        assert_eq!(analyze(&trace).count(Code::NonMonotoneCut), 1);
        assert!(!check_serializable(&trace, 6).unwrap());
    }

    #[test]
    fn single_tx_is_serializable() {
        let trace = Trace { events: vec![commit(1, vec![("a", None)], vec![("a", Some("1"))])] };
        assert!(check_serializable(&trace, 6).unwrap());
    }

    #[test]
    fn write_skew_is_not_serializable() {
        // Both read x and y from the same snapshot; each writes one of them.
        let mut t1 = commit(2, vec![("x", Some("1")), ("y", Some("1"))], vec![("x", Some("0"))]);
        let mut t2 = commit(3, vec![("x", Some("1")), ("y", Some("1"))], vec![("y", Some("0"))]);
        if let (TraceEvent::Commit(a), TraceEvent::Commit(b)) = (&mut t1, &mut t2) {
            a.snapshot = CutId(1);
            b.snapshot = CutId(1);
        }
        let setup = commit(1, vec![], vec![("x", Some("1")), ("y", Some("1"))]);
        let trace = Trace { events: vec![setup, t1, t2] };
        assert!(analyze(&trace).is_clean());
        assert!(!check_serializable(&trace, 6).unwrap());
    }

    #[test]
    fn concurrent_overlapping_writes_are_lost_updates() {
        let setup = commit(1, vec![], vec![("x", Some("0"))]);
        let mut a = commit(2, vec![], vec![("x", Some("1"))]);
        let mut b = commit(3, vec![], vec![("x", Some("2"))]);
        if let (TraceEvent::Commit(a), TraceEvent::Commit(b)) = (&mut a, &mut b) {
            a.snapshot = CutId(1);
            b.snapshot = CutId(1);
        }
        let report = analyze(&Trace { events: vec![setup, a, b] });
        assert_eq!(report.count(Code::LostUpdate), 1, "{report:?}");
    }

    #[test]
    fn too_many_transactions() {
        let events: Vec<_> = (1..=7).map(|c| commit(c, vec![], vec![("a", Some("1"))])).collect();
        assert_eq!(
            check_serializable(&Trace { events }, 6),
            Err(Error::TooManyTransactions { count: 7, max: 6 })
        );
    }
}
