use ctxlake::analyzer::{analyze, check_serializable, Code, MAX_SERIAL_TX};
use ctxlake::kernel::Layer;
use ctxlake::sim::{
    default_prototypes, run_scenario, warehouse_times as wt, FailureVariant, Mode, ScenarioConfig, SCENARIOS,
};
use ctxlake::trace::{Trace, TraceEvent};

fn run(config: ScenarioConfig) -> Trace {
    run_scenario(&config).unwrap().trace
}

fn retrieval_value(trace: &Trace, agent: &str, key: &str) -> Vec<(u64, Option<String>)> {
    trace
        .retrievals()
        .filter(|r| r.agent == agent && r.key == key.as_bytes())
        .map(|r| (r.time_ms, r.value.as_ref().map(|v| String::from_utf8_lossy(v).into_owned())))
        .collect()
}

fn external_actions(trace: &Trace) -> Vec<(u64, String, String)> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::ExternalAction(a) => Some((a.time_ms, a.decision_id.clone(), a.action.clone())),
            _ => None,
        })
        .collect()
}

#[test]
fn warehouse_timeline_in_context_lake() {
    let trace = run(ScenarioConfig::new("warehouse"));

    let correction = trace
        .commits()
        .find(|c| c.decision_id.as_deref() == Some("apply-correction-SKU1"))
        .expect("correction commit");
    assert_eq!(correction.time_ms, wt::CORRECTION);
    let inv = correction.writes.iter().find(|w| w.key == b"inv:SKU1").unwrap();
    assert_eq!(inv.value.as_deref(), Some(&b"1"[..]));

    assert_eq!(
        retrieval_value(&trace, "shipping", "inv:SKU1"),
        vec![(wt::ORDER_PLACED, Some("2".into())), (wt::SHIPPING_READ, Some("1".into()))]
    );
    assert_eq!(
        external_actions(&trace),
        vec![(wt::ESCALATION, "ship-O1".into(), "escalate O1 for split shipment approval".into())]
    );

    let report = analyze(&trace);
    assert!(report.is_clean(), "{report:?}");
    assert_eq!(report.summary.decisions, 3);
    assert_eq!(report.summary.admitted, 3);
}

#[test]
fn warehouse_composed_commits_the_invalid_order() {
    let trace = run(ScenarioConfig::new("warehouse").with_mode(Mode::Composed).with_lag("replica", 60));
    assert_eq!(retrieval_value(&trace, "shipping", "inv:SKU1").last().unwrap(), &(wt::SHIPPING_READ, Some("2".into())));
    let actions = external_actions(&trace);
    assert_eq!(actions.len(), 1);
    assert_eq!(actions[0].0, wt::SHIPPING_READ);
    assert!(actions[0].2.starts_with("ship O1"), "{actions:?}");

    let report = analyze(&trace);
    assert_eq!(report.count(Code::InvalidOutcome), 1);
    assert!(report.codes_for("ship-O1").contains(&Code::InvalidOutcome));
}

#[test]
fn composed_lag_witnesses_for_every_policy() {
    for (key, lag) in [("replica", 60), ("cache", 200), ("index", 100), ("batch", 50)] {
        let trace = run(ScenarioConfig::new("warehouse").with_mode(Mode::Composed).with_lag(key, lag));
        let report = analyze(&trace);
        assert!(report.codes_for("ship-O1").contains(&Code::InvalidOutcome), "{key}={lag}: {report:?}");
    }
    for (key, lag) in [("replica", 0), ("cache", 0), ("index", 0), ("batch", 0)] {
        let trace = run(ScenarioConfig::new("warehouse").with_mode(Mode::Composed).with_lag(key, lag));
        assert!(analyze(&trace).is_clean(), "{key}=0 should degenerate to the primary");
    }
}

#[test]
fn checkout_holds_in_context_lake_and_ships_when_siloed() {
    let lake = run(ScenarioConfig::new("checkout"));
    let actions = external_actions(&lake);
    assert_eq!(actions, vec![(320, "checkout-P1".into(), "hold P1 for review".into())]);
    let decision = lake.decisions().next().unwrap();
    let cited = decision
        .record
        .premises
        .iter()
        .find(|p| p.layer == Layer::Semantic && p.key == b"behavior:acct:42")
        .expect("behavior record cited");
    assert_eq!(cited.kind, ctxlake::admissibility::PremiseKind::Semantic);
    assert!(analyze(&lake).is_clean());

    let composed = run(ScenarioConfig::new("checkout").with_mode(Mode::Composed));
    assert_eq!(external_actions(&composed), vec![(320, "checkout-P1".into(), "ship P1".into())]);
    assert_eq!(retrieval_value(&composed, "checkout", "behavior:acct:42"), vec![(300, None)]);
    assert!(analyze(&composed).codes_for("checkout-P1").contains(&Code::InvalidOutcome));
}

/// Independent signed feature hash, 64 slots, FNV-1a.
fn oracle_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; 64];
    for token in text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.to_ascii_lowercase().bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        v[(h % 64) as usize] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
    }
    v
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b))
}

#[test]
fn checkout_classification_matches_oracle() {
    let clicks = "direct arrival on checkout url no product browse before checkout new payment method added at checkout";
    let query = oracle_embed(clicks);
    let best = default_prototypes()
        .labels
        .iter()
        .map(|l| (l.label.clone(), oracle_cosine(&query, &oracle_embed(&l.prototype))))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(best.0, "direct-arrival-no-browse");

    let run = run_scenario(&ScenarioConfig::new("checkout")).unwrap();
    let cut = run.lake.kernel().begin_snapshot();
    let record = run.lake.read_semantic(cut, b"behavior:acct:42").unwrap().unwrap();
    assert_eq!(record.interpretation_text(), best.0);
    assert_eq!(record.transform_id, "behavior_patterns");
}

#[test]
fn failure_matrix_symptoms() {
    for variant in FailureVariant::ALL {
        for seed in 0..5 {
            let trace = run(ScenarioConfig::new(&variant.scenario()).with_seed(seed));
            let report = analyze(&trace);
            match variant.symptom() {
                None => assert!(report.is_clean(), "{variant:?} seed {seed}: {report:?}"),
                Some(code) => assert!(
                    report.summary.violations_by_code.contains_key(code),
                    "{variant:?} seed {seed}: {report:?}"
                ),
            }
        }
    }
}

#[test]
fn gate_and_analyzer_agree_on_every_scenario() {
    for scenario in SCENARIOS {
        for mode in [Mode::ContextLake, Mode::Composed] {
            for seed in 0..3 {
                let trace = run(ScenarioConfig::new(scenario).with_mode(mode).with_seed(seed));
                let report = analyze(&trace);
                for code in [Code::GateDisagreement, Code::EffectOfRejectedDecision, Code::UnrecordedPremise] {
                    assert_eq!(report.count(code), 0, "{scenario} {mode} {seed}: {report:?}");
                }
                for code in [Code::NonAtomicVisibility, Code::RetrievalMismatch, Code::NonMonotoneCut, Code::LostUpdate] {
                    assert_eq!(report.count(code), 0, "{scenario} {mode} {seed}: {report:?}");
                }
            }
        }
    }
}

#[test]
fn small_traces_are_serializable() {
    let mut checked = 0;
    for scenario in SCENARIOS {
        for mode in [Mode::ContextLake, Mode::Composed] {
            let trace = run(ScenarioConfig::new(scenario).with_mode(mode));
            match check_serializable(&trace, MAX_SERIAL_TX) {
                Ok(ok) => {
                    assert!(ok, "{scenario} {mode}");
                    checked += 1;
                }
                Err(ctxlake::Error::TooManyTransactions { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }
    assert!(checked >= 4);
}

#[test]
fn runs_are_byte_deterministic() {
    for scenario in SCENARIOS {
        let config = ScenarioConfig::new(scenario).with_seed(11);
        assert_eq!(run(config.clone()).to_jsonl(), run(config).to_jsonl(), "{scenario}");
    }
    let a = run(ScenarioConfig::new("load_sweep").with_seed(1)).to_jsonl();
    let b = run(ScenarioConfig::new("load_sweep").with_seed(2)).to_jsonl();
    assert_ne!(a, b, "seed must matter");
}

#[test]
fn trace_round_trips_through_jsonl() {
    let trace = run(ScenarioConfig::new("failure_matrix").with_mode(Mode::Composed));
    let parsed = Trace::parse_str(&trace.to_jsonl()).unwrap();
    assert_eq!(parsed, trace);
    assert_eq!(analyze(&parsed), analyze(&trace));
}

#[test]
fn load_sweep_respects_the_envelope() {
    let config = ScenarioConfig::new("load_sweep");
    let run = run_scenario(&config).unwrap();
    assert!(run.metrics.peak_in_flight <= config.max_concurrent);
    assert!(run.metrics.over_envelope > 0, "2C offered load must shed some work");
    assert!(analyze(&run.trace).is_clean());
    let max_age = run.metrics.max_premise_age_ms().unwrap();
    assert!(max_age < config.delta_ms, "{max_age}");
}
