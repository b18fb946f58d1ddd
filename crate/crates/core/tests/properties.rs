use std::sync::Arc;

use ctxlake::admissibility::{check_decision, DecisionRecord, Effect, PremiseKind, PremiseRef, SemanticResolution, PremiseResolver};
use ctxlake::analyzer::{check_serializable, MAX_SERIAL_TX};
use ctxlake::composed::{ComposedView, LagPolicy};
use ctxlake::envelope::EnvelopeConfig;
use ctxlake::kernel::{Clock, CutId, Kernel, Layer, LogicalTime, SimClock};
use ctxlake::layers::ContextLake;
use ctxlake::semantic::{SemanticOutput, Transformation};
use ctxlake::trace::{Commit, Trace, TraceEvent};
use ctxlake::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Unregistered;

impl PremiseResolver for Unregistered {
    fn resolve_semantic(&self, _: &PremiseRef) -> SemanticResolution {
        SemanticResolution::Unregistered
    }
}

fn premise(cut: u64, retrieved_at: u64, kind: PremiseKind) -> PremiseRef {
    PremiseRef { layer: Layer::State, key: b"k".to_vec(), cut: CutId(cut), retrieved_at: LogicalTime(retrieved_at), kind }
}

fn record(premises: Vec<PremiseRef>, decided_at: u64, opaque: bool, shared: bool) -> DecisionRecord {
    DecisionRecord {
        decision_id: "d".into(),
        agent_id: "a".into(),
        premises,
        opaque_context_declared: opaque,
        decided_at: LogicalTime(decided_at),
        effects: vec![Effect::External { action: "act".into() }],
        shared_effects: shared,
    }
}

fn arb_decision() -> impl Strategy<Value = DecisionRecord> {
    (
        prop::collection::vec((0u64..6, 0u64..500, any::<bool>()), 1..5),
        0u64..700,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(ps, decided, opaque, shared)| {
            let premises = ps
                .into_iter()
                .map(|(cut, at, sem)| {
                    premise(cut, at.min(decided), if sem { PremiseKind::Semantic } else { PremiseKind::Base })
                })
                .collect();
            record(premises, decided, opaque, shared)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn envelope_boundary_is_exact(delta in 1u64..10_000, retrieved in 0u64..1_000_000) {
        let env = EnvelopeConfig::new(delta, 1).unwrap();
        let inside = record(vec![premise(1, retrieved, PremiseKind::Base)], retrieved + delta - 1, false, true);
        let at_edge = record(vec![premise(1, retrieved, PremiseKind::Base)], retrieved + delta, false, true);
        prop_assert!(check_decision(&inside, &env, CutId(1), &Unregistered).admitted);
        let v = check_decision(&at_edge, &env, CutId(1), &Unregistered);
        prop_assert_eq!(v.violations, vec![ctxlake::admissibility::Violation::StalePremise]);
    }

    #[test]
    fn admission_is_monotone_in_delta(d in arb_decision(), delta in 1u64..400, extra in 0u64..400, latest in 0u64..6) {
        let tight = EnvelopeConfig::new(delta, 1).unwrap();
        let loose = EnvelopeConfig::new(delta + extra, 1).unwrap();
        let a = check_decision(&d, &tight, CutId(latest), &Unregistered);
        let b = check_decision(&d, &loose, CutId(latest), &Unregistered);
        if a.admitted {
            prop_assert!(b.admitted);
        }
        prop_assert!(b.violations.iter().all(|v| a.violations.contains(v)));
    }

    #[test]
    fn check_is_pure(d in arb_decision(), delta in 1u64..400, latest in 0u64..6) {
        let env = EnvelopeConfig::new(delta, 1).unwrap();
        let first = check_decision(&d, &env, CutId(latest), &Unregistered);
        let clone = d.clone();
        prop_assert_eq!(&first, &check_decision(&clone, &env, CutId(latest), &Unregistered));
        prop_assert_eq!(first.admitted, first.violations.is_empty());
        let sorted = { let mut v = first.violations.clone(); v.sort(); v.dedup(); v };
        prop_assert_eq!(first.violations, sorted);
    }

    #[test]
    fn zero_lag_composition_is_the_primary(
        ops in prop::collection::vec((0usize..4, 0u8..5, 1u64..50), 1..40),
        policy in 0usize..4,
    ) {
        let clock = SimClock::default();
        let lake = Arc::new(ContextLake::new(Arc::new(clock.clone())));
        let policy = [LagPolicy::replica_lag(0), LagPolicy::cache_ttl(0), LagPolicy::index_refresh(0), LagPolicy::batch_refresh(0)][policy];
        let mut view = ComposedView::new(Arc::clone(&lake)).with_subsystem("hot", Layer::State, policy);
        let mut now = 0;
        for (key, value, step) in ops {
            now += step;
            clock.advance_to(LogicalTime(now));
            let key = format!("k{key}");
            view.write_state(key.as_bytes(), Some(vec![value])).unwrap();
            for probe in 0..4 {
                let probe = format!("k{probe}");
                let seen = view.composed_read_at("hot", probe.as_bytes(), LogicalTime(now)).unwrap();
                let truth = lake.read_state(lake.kernel().begin_snapshot(), probe.as_bytes()).unwrap();
                prop_assert_eq!(seen.value, truth);
            }
        }
    }
}

fn commit_trace(kernel: &Kernel) -> Trace {
    let mut trace = Trace::default();
    for record in kernel.commit_log() {
        trace.push(TraceEvent::Commit(Commit::from_record(&record, None, Vec::new())));
    }
    trace
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Under snapshot isolation, transactions that write everything they read
    /// cannot write-skew, so every committed history is serializable.
    #[test]
    fn read_subset_of_write_histories_are_serializable(seed in any::<u64>(), n in 1usize..=MAX_SERIAL_TX) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = Kernel::new(Arc::new(SimClock::default()));
        let keys = [b"a", b"b", b"c", b"d"];
        let mut open = Vec::new();
        for i in 0..n {
            let mut tx = kernel.begin_tx();
            let mut chosen: Vec<_> = keys.iter().filter(|_| rng.gen_bool(0.5)).collect();
            if chosen.is_empty() {
                chosen.push(&keys[i % keys.len()]);
            }
            for key in chosen {
                let before = kernel.tx_read(&mut tx, Layer::State, *key).unwrap();
                let next = before.map_or(1, |v| v[0].wrapping_add(1));
                kernel.tx_write(&mut tx, Layer::State, *key, vec![next]).unwrap();
            }
            open.push(tx);
            if rng.gen_bool(0.5) {
                open.shuffle(&mut rng);
                let mut tx = open.pop().unwrap();
                match kernel.commit_tx(&mut tx) {
                    Ok(_) | Err(Error::WriteConflict { .. }) => {}
                    Err(e) => panic!("{e}"),
                }
            }
        }
        open.shuffle(&mut rng);
        for mut tx in open {
            match kernel.commit_tx(&mut tx) {
                Ok(_) | Err(Error::WriteConflict { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        prop_assert!(check_serializable(&commit_trace(&kernel), MAX_SERIAL_TX).unwrap());
    }
}

#[test]
fn kernel_write_skew_is_caught() {
    let kernel = Kernel::new(Arc::new(SimClock::default()));
    let mut setup = kernel.begin_tx();
    kernel.tx_write(&mut setup, Layer::State, b"x", b"1".to_vec()).unwrap();
    kernel.tx_write(&mut setup, Layer::State, b"y", b"1".to_vec()).unwrap();
    kernel.commit_tx(&mut setup).unwrap();

    // Each on-call doctor checks that the other is still on call, then leaves.
    let mut t1 = kernel.begin_tx();
    let mut t2 = kernel.begin_tx();
    for tx in [&mut t1, &mut t2] {
        kernel.tx_read(tx, Layer::State, b"x").unwrap();
        kernel.tx_read(tx, Layer::State, b"y").unwrap();
    }
    kernel.tx_write(&mut t1, Layer::State, b"x", b"0".to_vec()).unwrap();
    kernel.tx_write(&mut t2, Layer::State, b"y", b"0".to_vec()).unwrap();
    kernel.commit_tx(&mut t1).unwrap();
    kernel.commit_tx(&mut t2).unwrap();

    assert!(!check_serializable(&commit_trace(&kernel), MAX_SERIAL_TX).unwrap());
}

const WORDS: &[&str] = &[
    "order", "refund", "late", "fraud", "chargeback", "browse", "checkout", "cart", "return", "defect",
    "ship", "hold", "review", "payment", "card", "address", "repeat", "new", "account", "inventory",
];

/// Brute-force cosine over an independent re-implementation of the hash embedder.
fn oracle_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; 64];
    for token in text.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in token.to_ascii_lowercase().bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        v[(h % 64) as usize] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[test]
fn similarity_search_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let clock: Arc<dyn Clock> = Arc::new(SimClock::default());
    let lake = ContextLake::new(clock);
    lake.register_transformation(Transformation::new("note", 1, |episodes| {
        episodes
            .iter()
            .map(|e| SemanticOutput {
                key: format!("note:{:04}", e.seq).into_bytes(),
                interpretation: e.payload.clone(),
            })
            .collect()
    }))
    .unwrap();

    let texts: Vec<String> = (0..1_000).map(|_| phrase(&mut rng)).collect();
    let seqs: Vec<u64> = texts
        .iter()
        .map(|t| lake.append_episode("notes", LogicalTime(0), t.as_bytes()).unwrap())
        .collect();
    for seq in &seqs {
        lake.run_transformation("note", 1, &[*seq]).unwrap();
    }
    let cut = lake.kernel().begin_snapshot();
    let corpus: Vec<(Vec<u8>, Vec<f64>)> = seqs
        .iter()
        .zip(&texts)
        .map(|(seq, t)| (format!("note:{seq:04}").into_bytes(), oracle_embed(t)))
        .collect();

    for _ in 0..100 {
        let query = phrase(&mut rng);
        let k = rng.gen_range(1..=20);
        let q = oracle_embed(&query);
        let mut expected: Vec<(f64, &Vec<u8>)> = corpus
            .iter()
            .filter(|(_, v)| v.iter().any(|x| *x != 0.0))
            .map(|(key, v)| (oracle_cosine(&q, v), key))
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let expected: Vec<&Vec<u8>> = expected.into_iter().take(k).map(|(_, key)| key).collect();

        let hits = lake.similarity_search(cut, &lake.embed(query.as_bytes()), k).unwrap();
        let got: Vec<&Vec<u8>> = hits.iter().map(|h| &h.key).collect();
        assert_eq!(got, expected, "query {query:?} k={k}");
    }
}

#[test]
fn embedder_orders_like_the_oracle() {
    let lake = ContextLake::default();
    let anchor = "late refund chargeback";
    let candidates = ["late refund", "refund chargeback fraud", "browse cart", "late late late", "chargeback"];
    let mut ours: Vec<(f64, &str)> =
        candidates.iter().map(|c| (lake.embed(anchor.as_bytes()).cosine(&lake.embed(c.as_bytes())), *c)).collect();
    let mut oracle: Vec<(f64, &str)> =
        candidates.iter().map(|c| (oracle_cosine(&oracle_embed(anchor), &oracle_embed(c)), *c)).collect();
    for v in [&mut ours, &mut oracle] {
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    }
    let names = |v: &[(f64, &str)]| v.iter().map(|x| x.1.to_string()).collect::<Vec<_>>();
    assert_eq!(names(&ours), names(&oracle));
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a.0 - b.0).abs() < 1e-12);
    }
}
