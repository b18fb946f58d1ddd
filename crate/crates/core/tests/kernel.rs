use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use ctxlake::kernel::{CutId, Kernel, Layer, LogicalTime, SimClock};
use ctxlake::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORKERS: usize = 8;
const COMMITS_PER_WORKER: usize = 1_250;

/// Groups of 2 to 5 keys that are always written together.
fn groups() -> Vec<Vec<Vec<u8>>> {
    (0..12)
        .map(|g| (0..2 + g % 4).map(|i| format!("g{g}:k{i}").into_bytes()).collect())
        .collect()
}

fn kernel() -> Arc<Kernel> {
    Arc::new(Kernel::new(Arc::new(SimClock::default())))
}

fn check_groups(kernel: &Kernel, cut: CutId, groups: &[Vec<Vec<u8>>]) -> Result<(), String> {
    for group in groups {
        let values: Vec<_> = group.iter().map(|k| kernel.read(cut, Layer::State, k).unwrap()).collect();
        if values.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("cut {cut} exposes a partial commit: {values:?}"));
        }
    }
    Ok(())
}

#[test]
fn threaded_stress_keeps_every_invariant() {
    let kernel = kernel();
    let groups = Arc::new(groups());
    let done = Arc::new(AtomicBool::new(false));

    let checker = {
        let (kernel, groups, done) = (Arc::clone(&kernel), Arc::clone(&groups), Arc::clone(&done));
        thread::spawn(move || {
            let mut failures = Vec::new();
            let mut checks = 0;
            while !done.load(Ordering::Acquire) || checks == 0 {
                let cut = kernel.begin_snapshot();
                let first = kernel.scan(cut, Layer::State, ..).unwrap();
                if let Err(e) = check_groups(&kernel, cut, &groups) {
                    failures.push(e);
                }
                if kernel.scan(cut, Layer::State, ..).unwrap() != first {
                    failures.push(format!("snapshot {cut} not repeatable"));
                }
                checks += 1;
            }
            failures
        })
    };

    let workers: Vec<_> = (0..WORKERS)
        .map(|w| {
            let (kernel, groups) = (Arc::clone(&kernel), Arc::clone(&groups));
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
                let mut cuts = Vec::with_capacity(COMMITS_PER_WORKER);
                let mut conflicts = 0;
                while cuts.len() < COMMITS_PER_WORKER {
                    let group = &groups[rng.gen_range(0..groups.len())];
                    let token = format!("w{w}-{}", cuts.len()).into_bytes();
                    let mut tx = kernel.begin_tx();
                    kernel.tx_read(&mut tx, Layer::State, &group[0]).unwrap();
                    for key in group {
                        kernel.tx_write(&mut tx, Layer::State, key, token.clone()).unwrap();
                    }
                    kernel.tx_append(&mut tx, token.clone(), LogicalTime(0)).unwrap();
                    match kernel.commit_tx(&mut tx) {
                        Ok(cut) => cuts.push(cut),
                        Err(Error::WriteConflict { .. }) => conflicts += 1,
                        Err(e) => panic!("unexpected {e}"),
                    }
                }
                (cuts, conflicts)
            })
        })
        .collect();

    let mut total = 0;
    for worker in workers {
        let (cuts, _conflicts) = worker.join().unwrap();
        assert!(cuts.windows(2).all(|w| w[0] < w[1]), "cuts seen by one worker must increase");
        total += cuts.len();
    }
    done.store(true, Ordering::Release);
    let failures = checker.join().unwrap();
    assert!(failures.is_empty(), "{failures:?}");

    assert_eq!(total, WORKERS * COMMITS_PER_WORKER);
    let log = kernel.commit_log();
    assert_eq!(log.len(), total);
    assert!(log.iter().enumerate().all(|(i, c)| c.cut == CutId(i as u64 + 1)), "cuts must be dense");
    assert_eq!(kernel.episode_count(), total as u64);

    let latest = kernel.begin_snapshot();
    let final_eps = kernel.episodic_entries(latest).unwrap();
    for probe in [CutId(1), CutId(latest.0 / 2), latest] {
        check_groups(&kernel, probe, &groups).unwrap();
        let earlier = kernel.episodic_entries(probe).unwrap();
        assert_eq!(&final_eps[..earlier.len()], earlier.as_slice(), "episodic layer must only grow");
    }
}

#[test]
fn atomic_visibility_fuzz() {
    let kernel = kernel();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let keys: Vec<Vec<u8>> = (0..32).map(|i| format!("k{i:02}").into_bytes()).collect();
    let mut model: Vec<BTreeMap<Vec<u8>, Vec<u8>>> = vec![BTreeMap::new()];
    let mut open = Vec::new();

    for i in 0..10_000u32 {
        let n = rng.gen_range(2..=5);
        let mut tx = kernel.begin_tx();
        let mut staged = BTreeMap::new();
        for _ in 0..n {
            let key = keys[rng.gen_range(0..keys.len())].clone();
            let value = format!("v{i}-{}", rng.gen::<u16>()).into_bytes();
            kernel.tx_write(&mut tx, Layer::State, &key, value.clone()).unwrap();
            staged.insert(key, value);
        }
        // Hold some transactions open across later commits so conflicts and
        // stale snapshots are exercised too.
        open.push((tx, staged));
        if open.len() < 3 && rng.gen_bool(0.5) {
            continue;
        }
        let (mut tx, staged) = open.remove(rng.gen_range(0..open.len()));
        match kernel.commit_tx(&mut tx) {
            Ok(cut) => {
                let mut next = model.last().unwrap().clone();
                next.extend(staged);
                model.push(next);
                assert_eq!(cut.0 as usize, model.len() - 1);
            }
            Err(Error::WriteConflict { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
    assert!(model.len() > 1_000);
    for (cut, expected) in model.iter().enumerate() {
        let actual: BTreeMap<_, _> = kernel.scan(CutId(cut as u64), Layer::State, ..).unwrap().into_iter().collect();
        assert_eq!(&actual, expected, "cut {cut}");
    }
}

#[test]
fn write_conflict_is_first_committer_wins() {
    let kernel = kernel();
    let mut a = kernel.begin_tx();
    let mut b = kernel.begin_tx();
    kernel.tx_write(&mut a, Layer::State, b"x", b"a".to_vec()).unwrap();
    kernel.tx_write(&mut b, Layer::State, b"x", b"b".to_vec()).unwrap();
    assert_eq!(kernel.commit_tx(&mut a), Ok(CutId(1)));
    assert!(matches!(kernel.commit_tx(&mut b), Err(Error::WriteConflict { .. })));
    assert_eq!(kernel.read(CutId(1), Layer::State, b"x").unwrap(), Some(b"a".to_vec()));
}
