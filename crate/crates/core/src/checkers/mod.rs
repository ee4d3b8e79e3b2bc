//! Checker plugins.
//!
//! A checker sees every machine event together with read-only views of the
//! machine and of the shadow state as it was *before* the event's own
//! propagation, and reports rule violations as [`Warning`]s. Checkers are
//! registered by name in a [`CheckerRegistry`] and instantiated into a
//! [`CheckerSet`] for one run.

mod fmt_taint;
mod lockset;
mod null_check;
mod user_ptr;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::machine::{Event, MachineState, Tid};
use crate::shadow::{ObjectId, ShadowState};

pub use fmt_taint::FmtChecker;
pub use lockset::{Lockset, LocksetChecker, LocksetTable, Tracked};
pub use null_check::NullChecker;
pub use user_ptr::UserChecker;

/// The checker plugin contract.
pub trait Checker: Send {
    fn name(&self) -> &'static str;

    /// Inspect one event. The views are shared borrows: a checker cannot
    /// alter machine or shadow state.
    fn on_event(
        &mut self,
        event: &Event,
        machine: &MachineState,
        shadow: &ShadowState,
        out: &mut Vec<Warning>,
    );

    /// Forget all per-run state.
    fn reset(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    NullDerefUnchecked,
    UserReadUnchecked,
    UserWriteUnchecked,
    UserDerefIrqoff,
    FmtTainted,
    RaceEmptyLockset,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::NullDerefUnchecked,
        Rule::UserReadUnchecked,
        Rule::UserWriteUnchecked,
        Rule::UserDerefIrqoff,
        Rule::FmtTainted,
        Rule::RaceEmptyLockset,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Rule::NullDerefUnchecked => "NULL_DEREF_UNCHECKED",
            Rule::UserReadUnchecked => "USER_READ_UNCHECKED",
            Rule::UserWriteUnchecked => "USER_WRITE_UNCHECKED",
            Rule::UserDerefIrqoff => "USER_DEREF_IRQOFF",
            Rule::FmtTainted => "FMT_TAINTED",
            Rule::RaceEmptyLockset => "RACE_EMPTY_LOCKSET",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown rule `{0}`")]
pub struct UnknownRule(pub String);

impl FromStr for Rule {
    type Err = UnknownRule;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.code() == s)
            .ok_or_else(|| UnknownRule(s.to_string()))
    }
}

/// One rule violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub checker: String,
    pub rule: Rule,
    pub tid: Tid,
    pub pc: u32,
    pub step: u64,
    pub address: Option<u32>,
    pub object: Option<ObjectId>,
    pub detail: String,
}

/// What a warning is about, for deduplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subject {
    Object(ObjectId),
    Address(u32),
    Nothing,
}

/// Rule, site pc and subject: at most one warning per key per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub rule: Rule,
    pub pc: u32,
    pub subject: Subject,
}

impl Warning {
    pub fn dedup_key(&self) -> DedupKey {
        let subject = match (self.object, self.address) {
            (Some(id), _) => Subject::Object(id),
            (None, Some(addr)) => Subject::Address(addr),
            (None, None) => Subject::Nothing,
        };
        DedupKey { rule: self.rule, pc: self.pc, subject }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckerError {
    #[error("unknown checker `{name}` (known: {known})")]
    UnknownChecker { name: String, known: String },
    #[error("malformed option `{0}`, expected key=value")]
    MalformedOption(String),
    #[error("unknown option `{0}`")]
    UnknownOption(String),
    #[error("bad value `{value}` for option `{key}`")]
    BadOptionValue { key: String, value: String },
}

/// Flat `checker.key=value` options.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckerOptions(BTreeMap<String, String>);

impl CheckerOptions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self, CheckerError> {
        let mut options = Self::new();
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .filter(|(k, v)| !k.trim().is_empty() && !v.trim().is_empty())
                .ok_or_else(|| CheckerError::MalformedOption(pair.to_string()))?;
            options.set(key.trim(), value.trim());
        }
        Ok(options)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Boolean option spelled `on`/`off`.
    pub fn flag(&self, key: &str, default: bool) -> Result<bool, CheckerError> {
        match self.get(key) {
            None => Ok(default),
            Some("on") => Ok(true),
            Some("off") => Ok(false),
            Some(value) => Err(CheckerError::BadOptionValue {
                key: key.to_string(),
                value: value.to_string(),
            }),
        }
    }
}

type Factory = fn(&CheckerOptions) -> Result<Box<dyn Checker>, CheckerError>;

struct Registration {
    name: &'static str,
    summary: &'static str,
    options: &'static [&'static str],
    factory: Factory,
}

/// Checker constructors keyed by name, in registration order.
pub struct CheckerRegistry {
    entries: Vec<Registration>,
}

impl Default for CheckerRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CheckerRegistry {
    pub fn empty() -> Self {
        CheckerRegistry { entries: Vec::new() }
    }

    /// The four shipped checkers.
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register(NullChecker::NAME, "allocation/descriptor results used before a null check", &[], |_| {
            Ok(Box::new(NullChecker::new()))
        });
        registry.register(UserChecker::NAME, "kernel dereference of unchecked user pointers", &[], |_| {
            Ok(Box::new(UserChecker::new()))
        });
        registry.register(FmtChecker::NAME, "tainted bytes in PRINTF format strings", &[], |_| {
            Ok(Box::new(FmtChecker::new()))
        });
        registry.register(
            LocksetChecker::NAME,
            "lockset data race detection",
            &[LocksetChecker::OPT_TRACKED, LocksetChecker::OPT_GRACE],
            |opts| Ok(Box::new(LocksetChecker::from_options(opts)?)),
        );
        registry
    }

    pub fn register(
        &mut self,
        name: &'static str,
        summary: &'static str,
        options: &'static [&'static str],
        factory: Factory,
    ) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(Registration { name, summary, options, factory });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn summaries(&self) -> impl Iterator<Item = (&'static str, &'static str)> + '_ {
        self.entries.iter().map(|e| (e.name, e.summary))
    }

    /// Instantiate the named checkers. Names are validated and options are
    /// checked against the declared keys before anything is built.
    pub fn build(&self, names: &[&str], options: &CheckerOptions) -> Result<CheckerSet, CheckerError> {
        let mut selected = Vec::new();
        for &name in names {
            let entry = self
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckerError::UnknownChecker {
                    name: name.to_string(),
                    known: self.names().join(", "),
                })?;
            if !selected.iter().any(|e: &&Registration| e.name == name) {
                selected.push(entry);
            }
        }
        for (key, _) in options.iter() {
            if !self.entries.iter().any(|e| e.options.contains(&key)) {
                return Err(CheckerError::UnknownOption(key.to_string()));
            }
        }
        let plugins = selected
            .into_iter()
            .map(|e| (e.factory)(options))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CheckerSet::new(plugins))
    }

    pub fn build_all(&self, options: &CheckerOptions) -> Result<CheckerSet, CheckerError> {
        self.build(&self.names(), options)
    }
}

/// Instantiated checkers for one run, with run-wide deduplication.
pub struct CheckerSet {
    plugins: Vec<Box<dyn Checker>>,
    seen: HashSet<DedupKey>,
    scratch: Vec<Warning>,
}

impl CheckerSet {
    pub fn new(plugins: Vec<Box<dyn Checker>>) -> Self {
        CheckerSet { plugins, seen: HashSet::new(), scratch: Vec::new() }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.plugins.iter().map(|p| p.name()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn reset(&mut self) {
        self.seen.clear();
        for p in &mut self.plugins {
            p.reset();
        }
    }

    /// Deliver `event` to each plugin in registration order, appending the
    /// warnings whose dedup key is new.
    pub fn on_event(
        &mut self,
        event: &Event,
        machine: &MachineState,
        shadow: &ShadowState,
        out: &mut Vec<Warning>,
    ) {
        for plugin in &mut self.plugins {
            plugin.on_event(event, machine, shadow, &mut self.scratch);
            for warning in self.scratch.drain(..) {
                if self.seen.insert(warning.dedup_key()) {
                    out.push(warning);
                }
            }
        }
    }
}

/// Replay a recorded event stream against fixed views.
pub fn run_checkers(
    set: &mut CheckerSet,
    events: &[Event],
    machine: &MachineState,
    shadow: &ShadowState,
) -> Vec<Warning> {
    let mut out = Vec::new();
    for event in events {
        set.on_event(event, machine, shadow, &mut out);
    }
    out
}
