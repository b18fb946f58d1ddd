//! The decision admissibility gate.
//!
//! A decision is admitted only if all four closure conditions hold:
//!
//! | code                | condition                                                        |
//! |---------------------|------------------------------------------------------------------|
//! | `PrivatePremise`    | shared effects justified by declared-opaque or dangling premises  |
//! | `MixedCut`          | premises drawn from two or more cuts                              |
//! | `StalePremise`      | some premise has `decided_at - retrieved_at >= delta`             |
//! | `ImplicitSemantics` | a semantic premise whose value lacks registered provenance        |
//!
//! The gate only sees what agents declare. Opaque agent-local context has to
//! be self-declared through `opaque_context_declared`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::envelope::EnvelopeConfig;
use crate::error::{Error, Result};
use crate::kernel::{CutId, Layer, LogicalTime, PrepareToken, Transaction};
use crate::layers::{ContextLake, SemanticRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PremiseKind {
    Base,
    Semantic,
}

/// A store reference cited as justification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PremiseRef {
    pub layer: Layer,
    #[serde(with = "codec::text")]
    pub key: Vec<u8>,
    pub cut: CutId,
    pub retrieved_at: LogicalTime,
    pub kind: PremiseKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Effect {
    Write {
        layer: Layer,
        #[serde(with = "codec::text")]
        key: Vec<u8>,
        #[serde(with = "codec::b64_opt")]
        value: Option<Vec<u8>>,
    },
    /// An episode appended under the deciding agent's name.
    Episode {
        payload: String,
    },
    External {
        action: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub decision_id: String,
    pub agent_id: String,
    pub premises: Vec<PremiseRef>,
    pub opaque_context_declared: bool,
    pub decided_at: LogicalTime,
    pub effects: Vec<Effect>,
    pub shared_effects: bool,
}

impl DecisionRecord {
    pub fn validate(&self) -> Result<()> {
        let malformed = |reason: &str| Error::MalformedDecision {
            id: self.decision_id.clone(),
            reason: reason.to_string(),
        };
        if self.effects.is_empty() {
            return Err(malformed("no effects"));
        }
        if self.premises.iter().any(|p| p.retrieved_at > self.decided_at) {
            return Err(malformed("premise retrieved after the decision"));
        }
        Ok(())
    }

    pub fn premise_ages_ms(&self) -> Vec<u64> {
        self.premises.iter().map(|p| self.decided_at.since(p.retrieved_at)).collect()
    }

    pub fn external_actions(&self) -> impl Iterator<Item = &str> {
        self.effects.iter().filter_map(|e| match e {
            Effect::External { action } => Some(action.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Violation {
    PrivatePremise,
    MixedCut,
    StalePremise,
    ImplicitSemantics,
}

impl Violation {
    pub const ALL: [Violation; 4] = [
        Violation::PrivatePremise,
        Violation::MixedCut,
        Violation::StalePremise,
        Violation::ImplicitSemantics,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            Violation::PrivatePremise => "PrivatePremise",
            Violation::MixedCut => "MixedCut",
            Violation::StalePremise => "StalePremise",
            Violation::ImplicitSemantics => "ImplicitSemantics",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub admitted: bool,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn from_violations(mut violations: Vec<Violation>) -> Self {
        violations.sort();
        violations.dedup();
        Self { admitted: violations.is_empty(), violations }
    }
}

/// What a semantic premise's value turned out to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticResolution {
    /// Nothing stored there: an observation of absence asserts no meaning.
    Absent,
    Registered,
    Unregistered,
}

pub trait PremiseResolver {
    fn resolve_semantic(&self, premise: &PremiseRef) -> SemanticResolution;
}

impl PremiseResolver for ContextLake {
    fn resolve_semantic(&self, premise: &PremiseRef) -> SemanticResolution {
        match self.kernel().read(premise.cut, premise.layer, &premise.key) {
            Ok(Some(value)) => {
                let registered = premise.layer == Layer::Semantic
                    && SemanticRecord::decode(&premise.key, &value).is_ok_and(|r| {
                        r.has_provenance()
                            && self.registry().is_registered(&r.transform_id, r.transform_version)
                    });
                if registered {
                    SemanticResolution::Registered
                } else {
                    SemanticResolution::Unregistered
                }
            }
            Ok(None) | Err(_) => SemanticResolution::Absent,
        }
    }
}

/// Computes the verdict for `d`. Pure: same inputs, same verdict.
pub fn check_decision(
    d: &DecisionRecord,
    env: &EnvelopeConfig,
    latest: CutId,
    resolver: &dyn PremiseResolver,
) -> Verdict {
    let mut violations = Vec::new();
    let dangling = d.premises.iter().any(|p| p.cut > latest);
    if d.shared_effects && (d.opaque_context_declared || dangling) {
        violations.push(Violation::PrivatePremise);
    }
    let cuts: BTreeSet<CutId> = d.premises.iter().map(|p| p.cut).collect();
    if cuts.len() >= 2 {
        violations.push(Violation::MixedCut);
    }
    if d.premises.iter().any(|p| !env.admits_age(d.decided_at.since(p.retrieved_at))) {
        violations.push(Violation::StalePremise);
    }
    if d.premises.iter().any(|p| {
        p.kind == PremiseKind::Semantic
            && resolver.resolve_semantic(p) == SemanticResolution::Unregistered
    }) {
        violations.push(Violation::ImplicitSemantics);
    }
    Verdict::from_violations(violations)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Committed { cut: CutId, verdict: Verdict },
    Rejected(Verdict),
}

impl Admission {
    pub fn verdict(&self) -> &Verdict {
        match self {
            Admission::Committed { verdict, .. } | Admission::Rejected(verdict) => verdict,
        }
    }
}

/// Outcome of [`gate`]: either a prepared transaction or a rejection.
#[derive(Debug)]
pub enum Gated {
    Admitted { token: PrepareToken, verdict: Verdict },
    Rejected(Verdict),
}

/// Checks `d` and prepares `tx` only if it is admitted. External effects are
/// staged on `tx` as effect episodes first. A rejected decision's transaction
/// is rolled back, so it can never become visible.
pub fn gate(
    lake: &ContextLake,
    d: &DecisionRecord,
    env: &EnvelopeConfig,
    mut tx: Transaction,
) -> Result<Gated> {
    d.validate()?;
    let verdict = check_decision(d, env, lake.kernel().begin_snapshot(), lake);
    if !verdict.admitted {
        lake.kernel().rollback(&mut tx)?;
        return Ok(Gated::Rejected(verdict));
    }
    for action in d.external_actions() {
        let payload = format!("{}: {}", d.decision_id, action);
        lake.stage_episode(&mut tx, &d.agent_id, d.decided_at, payload.as_bytes())?;
    }
    let token = lake.prepare(&mut tx)?;
    Ok(Gated::Admitted { token, verdict })
}

/// Gates `d` and, if admitted, commits `tx` (which must already carry the
/// decision's store writes).
pub fn admit_and_commit(
    lake: &ContextLake,
    d: &DecisionRecord,
    env: &EnvelopeConfig,
    tx: Transaction,
) -> Result<Admission> {
    match gate(lake, d, env, tx)? {
        Gated::Admitted { token, verdict } => {
            let cut = lake.commit(token)?;
            Ok(Admission::Committed { cut, verdict })
        }
        Gated::Rejected(verdict) => Ok(Admission::Rejected(verdict)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Expect, Transition};
    use crate::semantic::{SemanticOutput, Transformation};

    struct NoSemantics;
    impl PremiseResolver for NoSemantics {
        fn resolve_semantic(&self, _: &PremiseRef) -> SemanticResolution {
            SemanticResolution::Absent
        }
    }

    fn premise(cut: u64, retrieved_at: u64) -> PremiseRef {
        PremiseRef {
            layer: Layer::State,
            key: b"inv:SKU1".to_vec(),
            cut: CutId(cut),
            retrieved_at: LogicalTime(retrieved_at),
            kind: PremiseKind::Base,
        }
    }

    fn decision(premises: Vec<PremiseRef>, decided_at: u64) -> DecisionRecord {
        DecisionRecord {
            decision_id: "d1".into(),
            agent_id: "shipping".into(),
            premises,
            opaque_context_declared: false,
            decided_at: LogicalTime(decided_at),
            effects: vec![Effect::External { action: "escalate".into() }],
            shared_effects: true,
        }
    }

    const ENV: EnvelopeConfig = EnvelopeConfig { delta_ms: 100, max_concurrent: 4 };

    #[test]
    fn age_just_inside_window_is_admitted() {
        let v = check_decision(&decision(vec![premise(3, 1_000)], 1_099), &ENV, CutId(3), &NoSemantics);
        assert!(v.admitted, "{v:?}");
    }

    #[test]
    fn age_equal_to_delta_is_stale() {
        let v = check_decision(&decision(vec![premise(3, 1_000)], 1_100), &ENV, CutId(3), &NoSemantics);
        assert_eq!(v.violations, vec![Violation::StalePremise]);
        assert!(!v.admitted);
    }

    #[test]
    fn two_cuts_is_mixed() {
        let v = check_decision(
            &decision(vec![premise(4, 10), premise(5, 10)], 20),
            &ENV,
            CutId(5),
            &NoSemantics,
        );
        assert_eq!(v.violations, vec![Violation::MixedCut]);
    }

    #[test]
    fn opaque_or_dangling_premises_are_private() {
        let mut d = decision(vec![premise(3, 10)], 20);
        d.opaque_context_declared = true;
        assert_eq!(check_decision(&d, &ENV, CutId(3), &NoSemantics).violations, vec![Violation::PrivatePremise]);
        d.shared_effects = false;
        assert!(check_decision(&d, &ENV, CutId(3), &NoSemantics).admitted);
        let d = decision(vec![premise(9, 10)], 20);
        assert_eq!(check_decision(&d, &ENV, CutId(3), &NoSemantics).violations, vec![Violation::PrivatePremise]);
    }

    #[test]
    fn no_premises_no_violations() {
        assert!(check_decision(&decision(vec![], 5), &ENV, CutId(0), &NoSemantics).admitted);
    }

    #[test]
    fn malformed_decisions_are_errors() {
        let mut d = decision(vec![premise(1, 50)], 40);
        assert!(d.validate().is_err());
        d.premises.clear();
        d.effects.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn adhoc_interpretation_is_implicit_semantics() {
        let lake = ContextLake::default();
        lake.register_transformation(Transformation::new("behavior_patterns", 1, |_| {
            vec![SemanticOutput { key: b"behavior:a".to_vec(), interpretation: b"direct arrival".to_vec() }]
        }))
        .unwrap();
        let seq = lake.append_episode("clicks", LogicalTime(1), b"checkout url").unwrap();
        lake.run_transformation("behavior_patterns", 1, &[seq]).unwrap();
        let mut tx = lake.begin_tx();
        lake.update_state(&mut tx, b"note:behavior:a", Transition::set(Expect::Any, "looks fine")).unwrap();
        let cut = lake.commit_tx(&mut tx).unwrap();

        let semantic = |layer, key: &[u8]| PremiseRef {
            layer,
            key: key.to_vec(),
            cut,
            retrieved_at: LogicalTime(10),
            kind: PremiseKind::Semantic,
        };
        let explicit = decision(vec![semantic(Layer::Semantic, b"behavior:a")], 20);
        assert!(check_decision(&explicit, &ENV, cut, &lake).admitted);
        let adhoc = decision(vec![semantic(Layer::State, b"note:behavior:a")], 20);
        assert_eq!(check_decision(&adhoc, &ENV, cut, &lake).violations, vec![Violation::ImplicitSemantics]);
        let absent = decision(vec![semantic(Layer::Semantic, b"behavior:zzz")], 20);
        assert!(check_decision(&absent, &ENV, cut, &lake).admitted);
    }

    #[test]
    fn rejected_decision_leaves_store_unchanged() {
        let lake = ContextLake::default();
        let mut tx = lake.begin_tx();
        lake.update_state(&mut tx, b"inv:SKU1", Transition::set(Expect::Any, "1")).unwrap();
        lake.commit_tx(&mut tx).unwrap();
        let before = lake.kernel().begin_snapshot();

        let mut tx = lake.begin_tx();
        lake.update_state(&mut tx, b"order:1", Transition::set(Expect::Any, "committed")).unwrap();
        let d = decision(vec![premise(0, 10), premise(1, 10)], 20);
        let admission = admit_and_commit(&lake, &d, &ENV, tx).unwrap();
        assert_eq!(admission, Admission::Rejected(Verdict::from_violations(vec![Violation::MixedCut])));
        assert_eq!(lake.kernel().begin_snapshot(), before);
        assert_eq!(lake.read_state(before, b"order:1").unwrap(), None);
    }

    #[test]
    fn admitted_decision_commits_effects_and_action_episode() {
        let lake = ContextLake::default();
        let mut tx = lake.begin_tx();
        lake.update_state(&mut tx, b"escalation:O1", Transition::set(Expect::Absent, "split")).unwrap();
        let d = decision(vec![premise(0, 10)], 20);
        let Admission::Committed { cut, .. } = admit_and_commit(&lake, &d, &ENV, tx).unwrap() else {
            panic!("expected commit");
        };
        assert_eq!(lake.read_state(cut, b"escalation:O1").unwrap(), Some(b"split".to_vec()));
        let eps = lake.episodes(cut).unwrap();
        assert!(eps.iter().any(|e| e.source == "shipping" && e.payload_text() == "d1: escalate"));
    }

    #[test]
    fn admitted_but_racing_decision_gets_write_conflict() {
        let lake = ContextLake::default();
        let mut a = lake.begin_tx();
        let mut b = lake.begin_tx();
        lake.update_state(&mut a, b"inv:SKU1", Transition::set(Expect::Any, "0")).unwrap();
        lake.update_state(&mut b, b"inv:SKU1", Transition::set(Expect::Any, "5")).unwrap();
        let d = decision(vec![premise(0, 10)], 20);
        assert!(matches!(admit_and_commit(&lake, &d, &ENV, a).unwrap(), Admission::Committed { .. }));
        assert!(matches!(admit_and_commit(&lake, &d, &ENV, b), Err(Error::WriteConflict { .. })));
    }

    #[test]
    fn decision_record_round_trips_through_json() {
        let mut d = decision(vec![premise(2, 10)], 20);
        d.effects.push(Effect::Write { layer: Layer::State, key: b"k".to_vec(), value: None });
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<DecisionRecord>(&json).unwrap(), d);
    }
}
