use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::machine::{Event, EventKind, LockId, MachineState, Tid};
use crate::shadow::ShadowState;

use super::{CheckerError, CheckerOptions, Checker, Rule, Warning};

/// Candidate lock set of one word. `Universal` is the set of all locks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lockset {
    Universal,
    Set(BTreeSet<LockId>),
}

impl Lockset {
    pub fn intersect(&mut self, held: &BTreeSet<LockId>) {
        match self {
            Lockset::Universal => *self = Lockset::Set(held.clone()),
            Lockset::Set(set) => set.retain(|l| held.contains(l)),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Lockset::Set(set) if set.is_empty())
    }

    /// `self ⊆ other`.
    pub fn is_subset(&self, other: &Lockset) -> bool {
        match (self, other) {
            (_, Lockset::Universal) => true,
            (Lockset::Universal, Lockset::Set(_)) => false,
            (Lockset::Set(a), Lockset::Set(b)) => a.is_subset(b),
        }
    }
}

impl fmt::Display for Lockset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lockset::Universal => f.write_str("ALL"),
            Lockset::Set(set) => {
                f.write_str("{")?;
                for (i, l) in set.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{l}")?;
                }
                f.write_str("}")
            }
        }
    }
}

/// Per-word candidate sets plus the words already reported.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocksetTable {
    locksets: BTreeMap<u32, Lockset>,
    reported: BTreeSet<u32>,
}

impl LocksetTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refine word `v` by the locks held at an access. Returns true when the
    /// set becomes empty for a word not yet reported.
    pub fn access(&mut self, v: u32, held: &BTreeSet<LockId>) -> bool {
        let set = self.locksets.entry(v).or_insert(Lockset::Universal);
        set.intersect(held);
        set.is_empty() && self.reported.insert(v)
    }

    pub fn get(&self, v: u32) -> Option<&Lockset> {
        self.locksets.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Lockset)> {
        self.locksets.iter().map(|(&v, s)| (v, s))
    }

    pub fn reported(&self) -> &BTreeSet<u32> {
        &self.reported
    }
}

/// Which accesses the lockset checker considers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracked {
    /// Every access from the first instruction on.
    All,
    /// Accesses outside every thread's stack, once a second thread exists.
    Heap,
}

/// Lockset race detector over 4-byte words.
///
/// Locks held per thread are rebuilt from `Lock`/`Unlock` events, so the
/// checker is a function of the event stream and can be replayed against
/// synthetic traces.
#[derive(Debug)]
pub struct LocksetChecker {
    tracked: Tracked,
    grace: bool,
    table: LocksetTable,
    held: BTreeMap<Tid, BTreeSet<LockId>>,
    multithreaded: bool,
    /// Under grace: words seen by exactly one thread so far.
    exclusive: BTreeMap<u32, Tid>,
}

impl LocksetChecker {
    pub const NAME: &'static str = "lockset";
    pub const OPT_TRACKED: &'static str = "lockset.tracked";
    pub const OPT_GRACE: &'static str = "lockset.grace";

    pub fn new(tracked: Tracked, grace: bool) -> Self {
        LocksetChecker {
            tracked,
            grace,
            table: LocksetTable::new(),
            held: BTreeMap::new(),
            multithreaded: false,
            exclusive: BTreeMap::new(),
        }
    }

    pub fn from_options(options: &CheckerOptions) -> Result<Self, CheckerError> {
        let tracked = match options.get(Self::OPT_TRACKED) {
            None | Some("heap") => Tracked::Heap,
            Some("all") => Tracked::All,
            Some(value) => {
                return Err(CheckerError::BadOptionValue {
                    key: Self::OPT_TRACKED.to_string(),
                    value: value.to_string(),
                })
            }
        };
        let grace = options.flag(Self::OPT_GRACE, false)?;
        Ok(Self::new(tracked, grace))
    }

    pub fn table(&self) -> &LocksetTable {
        &self.table
    }

    fn is_tracked(&self, addr: u32, machine: &MachineState) -> bool {
        match self.tracked {
            Tracked::All => true,
            Tracked::Heap => {
                self.multithreaded && !machine.threads.values().any(|t| t.stack_contains(addr))
            }
        }
    }

    /// Grace filter: true while only one thread has touched `v`.
    fn in_grace(&mut self, v: u32, tid: Tid) -> bool {
        if !self.grace {
            return false;
        }
        match self.exclusive.get(&v) {
            None if self.table.get(v).is_none() => {
                self.exclusive.insert(v, tid);
                true
            }
            Some(&owner) if owner == tid => true,
            Some(_) => {
                self.exclusive.remove(&v);
                false
            }
            None => false,
        }
    }
}

impl Checker for LocksetChecker {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_event(&mut self, event: &Event, machine: &MachineState, _: &ShadowState, out: &mut Vec<Warning>) {
        let tid = event.tid;
        match event.kind {
            EventKind::Lock { lock } => {
                self.held.entry(tid).or_default().insert(lock);
            }
            EventKind::Unlock { lock } => {
                self.held.entry(tid).or_default().remove(&lock);
            }
            EventKind::Spawn { .. } => self.multithreaded = true,
            _ => {}
        }
        let Some(access) = event.kind.access() else { return };
        if !self.is_tracked(access.addr, machine) {
            return;
        }
        let v = access.addr & !3;
        if self.in_grace(v, tid) {
            return;
        }
        let held = self.held.entry(tid).or_default();
        if self.table.access(v, held) {
            let held = held.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
            out.push(Warning {
                checker: Self::NAME.to_string(),
                rule: Rule::RaceEmptyLockset,
                tid,
                pc: event.pc,
                step: event.step,
                address: Some(v),
                object: None,
                detail: format!(
                    "{} of word {v:#x} by thread {tid} holding {{{held}}} leaves no common lock",
                    if access.is_write { "write" } else { "read" }
                ),
            });
        }
    }

    fn reset(&mut self) {
        *self = Self::new(self.tracked, self.grace);
    }
}
