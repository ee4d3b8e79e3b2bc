//! Thread schedulers, selected by name through [`SchedulerPolicy`].

use std::fmt;

use thiserror::Error;

use super::{MachineState, Tid};

/// Picks the thread that runs the next instruction.
pub trait Scheduler: Send {
    fn name(&self) -> &'static str;

    /// `None` when no thread is runnable.
    fn select(&mut self, state: &MachineState) -> Option<Tid>;
}

/// Scheduler kind plus its knobs, as given on the command line or in a
/// corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerPolicy {
    pub kind: String,
    /// Instructions per time slice.
    pub quantum: u32,
    pub seed: u64,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy { kind: RoundRobin::NAME.to_string(), quantum: 1, seed: 0 }
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} seed {} quantum {}", self.kind, self.seed, self.quantum)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("unknown scheduler `{0}` (known: {known})", known = names().join(", "))]
    UnknownKind(String),
    #[error("quantum must be at least 1")]
    ZeroQuantum,
}

type Factory = fn(&SchedulerPolicy) -> Box<dyn Scheduler>;

/// Registered schedulers: canonical name, aliases, constructor.
const REGISTRY: &[(&str, &[&str], Factory)] = &[
    (RoundRobin::NAME, &["rr"], |p| Box::new(RoundRobin::new(p.quantum))),
    (SeededRandom::NAME, &["seeded-random"], |p| {
        Box::new(SeededRandom::new(p.quantum, p.seed))
    }),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(name, _, _)| *name).collect()
}

impl SchedulerPolicy {
    pub fn new(kind: &str, quantum: u32, seed: u64) -> Result<Self, PolicyError> {
        let policy = SchedulerPolicy { kind: kind.to_string(), quantum, seed };
        policy.build()?;
        Ok(policy)
    }

    pub fn build(&self) -> Result<Box<dyn Scheduler>, PolicyError> {
        if self.quantum == 0 {
            return Err(PolicyError::ZeroQuantum);
        }
        REGISTRY
            .iter()
            .find(|(name, aliases, _)| *name == self.kind || aliases.contains(&self.kind.as_str()))
            .map(|(_, _, make)| make(self))
            .ok_or_else(|| PolicyError::UnknownKind(self.kind.clone()))
    }
}

/// Tracks how much of the current slice has been used.
#[derive(Debug, Clone)]
struct Slice {
    quantum: u32,
    used: u32,
}

impl Slice {
    /// Keep the current thread if it is still runnable and has slice left.
    fn keep(&mut self, state: &MachineState, runnable: &[Tid]) -> Option<Tid> {
        let current = state.current;
        if !state.preempt_requested() && self.used < self.quantum && runnable.contains(&current) {
            self.used += 1;
            return Some(current);
        }
        None
    }
}

/// Next runnable thread in increasing tid order after each slice.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    slice: Slice,
}

impl RoundRobin {
    pub const NAME: &'static str = "round-robin";

    pub fn new(quantum: u32) -> Self {
        RoundRobin { slice: Slice { quantum: quantum.max(1), used: 0 } }
    }
}

impl Scheduler for RoundRobin {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn select(&mut self, state: &MachineState) -> Option<Tid> {
        let runnable = state.runnable_tids();
        if runnable.is_empty() {
            return None;
        }
        if let Some(tid) = self.slice.keep(state, &runnable) {
            return Some(tid);
        }
        let next = runnable
            .iter()
            .copied()
            .find(|&t| t > state.current)
            .unwrap_or(runnable[0]);
        self.slice.used = 1;
        Some(next)
    }
}

/// Uniform draw over runnable threads at each slice boundary.
#[derive(Debug, Clone)]
pub struct SeededRandom {
    slice: Slice,
    rng: XorShift64Star,
}

impl SeededRandom {
    pub const NAME: &'static str = "random";

    pub fn new(quantum: u32, seed: u64) -> Self {
        SeededRandom { slice: Slice { quantum: quantum.max(1), used: 0 }, rng: XorShift64Star::new(seed) }
    }
}

impl Scheduler for SeededRandom {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn select(&mut self, state: &MachineState) -> Option<Tid> {
        let runnable = state.runnable_tids();
        if runnable.is_empty() {
            return None;
        }
        if let Some(tid) = self.slice.keep(state, &runnable) {
            return Some(tid);
        }
        let pick = runnable[(self.rng.next_u64() % runnable.len() as u64) as usize];
        self.slice.used = 1;
        Some(pick)
    }
}

/// Marsaglia's xorshift64* generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    /// A zero seed would lock the generator at zero, so it is remapped.
    const ZERO_SEED_REPLACEMENT: u64 = 0x9e37_79b9_7f4a_7c15;

    pub fn new(seed: u64) -> Self {
        let state = if seed == 0 { Self::ZERO_SEED_REPLACEMENT } else { seed };
        XorShift64Star { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }
}
