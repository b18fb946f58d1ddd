//! Discrete-event queue over logical time.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kernel::{Clock, LogicalTime, SimClock};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<E> {
    pub time: LogicalTime,
    pub seq: u64,
    pub event: E,
}

/// Events fire in `(time, insertion sequence)` order. Stepping advances the
/// clock to the event's time; scheduling into the past fires at the current
/// time instead.
#[derive(Debug)]
pub struct Schedule<E> {
    seed: u64,
    queue: BTreeMap<(LogicalTime, u64), E>,
    next_seq: u64,
    clock: SimClock,
    rng: ChaCha8Rng,
}

impl<E> Schedule<E> {
    pub fn new(seed: u64, clock: SimClock) -> Self {
        Self {
            seed,
            queue: BTreeMap::new(),
            next_seq: 0,
            clock,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> LogicalTime {
        self.clock.now()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn push(&mut self, time: LogicalTime, event: E) -> u64 {
        let time = time.max(self.now());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((time, seq), event);
        seq
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn step(&mut self) -> Option<Scheduled<E>> {
        let ((time, seq), event) = self.queue.pop_first()?;
        self.clock.advance_to(time);
        Some(Scheduled { time, seq, event })
    }
}
