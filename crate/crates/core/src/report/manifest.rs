//! Expectation manifests.
//!
//! Line-oriented, `#` starts a comment:
//!
//! ```text
//! policy <kind> seed <n> quantum <n>
//! expect <RULE> at <label> [false-positive]
//! program <file.s>
//! checkers <name,name,..>
//! option <key>=<value>
//! steps <n>
//! twin <entry-name>
//! ```
//!
//! `policy` is required and may appear once. Without `program` the source is
//! the manifest's stem with a `.s` extension; without `checkers` every
//! registered checker runs.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::checkers::{CheckerOptions, Rule, Warning};
use crate::isa::ProgramImage;
use crate::machine::SchedulerPolicy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub rule: Rule,
    pub label: String,
    /// Known false positive: still expected, but tallied separately.
    pub false_positive: bool,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    pub program: String,
    pub policy: SchedulerPolicy,
    pub checkers: Option<Vec<String>>,
    pub options: CheckerOptions,
    pub step_limit: Option<u64>,
    pub twin: Option<String>,
    pub expects: Vec<Expectation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{file}:{line}: {message}")]
pub struct ManifestError {
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl Manifest {
    /// Parse the manifest of entry `name`; `file` names it in errors.
    pub fn parse(name: &str, file: &str, text: &str) -> Result<Manifest, ManifestError> {
        let err = |line: usize, message: String| ManifestError { file: file.to_string(), line, message };
        let mut policy = None;
        let mut manifest = Manifest {
            name: name.to_string(),
            program: format!("{name}.s"),
            policy: SchedulerPolicy::default(),
            checkers: None,
            options: CheckerOptions::new(),
            step_limit: None,
            twin: None,
            expects: Vec::new(),
        };

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                [] => {}
                ["policy", kind, "seed", seed, "quantum", quantum] => {
                    if policy.is_some() {
                        return Err(err(n, "duplicate `policy` line".into()));
                    }
                    let seed = seed.parse().map_err(|_| err(n, format!("bad seed `{seed}`")))?;
                    let quantum = quantum.parse().map_err(|_| err(n, format!("bad quantum `{quantum}`")))?;
                    policy = Some(SchedulerPolicy::new(kind, quantum, seed).map_err(|e| err(n, e.to_string()))?);
                }
                ["expect", rule, "at", label, rest @ ..] => {
                    let false_positive = match rest {
                        [] => false,
                        ["false-positive"] => true,
                        _ => return Err(err(n, format!("unexpected trailing `{}`", rest.join(" ")))),
                    };
                    manifest.expects.push(Expectation {
                        rule: rule.parse().map_err(|e| err(n, format!("{e}")))?,
                        label: label.to_string(),
                        false_positive,
                        line: n,
                    });
                }
                ["program", file] => manifest.program = file.to_string(),
                ["checkers"] => manifest.checkers = Some(Vec::new()),
                ["checkers", list] => {
                    manifest.checkers = Some(list.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
                }
                ["option", pair] => {
                    let parsed = CheckerOptions::parse([*pair]).map_err(|e| err(n, e.to_string()))?;
                    for (k, v) in parsed.iter() {
                        manifest.options.set(k, v);
                    }
                }
                ["steps", steps] => {
                    manifest.step_limit = Some(steps.parse().map_err(|_| err(n, format!("bad step limit `{steps}`")))?)
                }
                ["twin", twin] => manifest.twin = Some(twin.to_string()),
                _ => return Err(err(n, format!("unrecognized line `{line}`"))),
            }
        }
        manifest.policy = policy.ok_or_else(|| err(0, "missing `policy` line".into()))?;
        Ok(manifest)
    }

    pub fn false_positive_count(&self) -> usize {
        self.expects.iter().filter(|e| e.false_positive).count()
    }
}

/// A warning site that did not match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub rule: Rule,
    pub pc: u32,
    pub label: Option<String>,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.label {
            Some(label) => write!(f, "{} at {} ({:#x})", self.rule, label, self.pc),
            None => write!(f, "{} at {:#x}", self.rule, self.pc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail { missing: Vec<Mismatch>, unexpected: Vec<Mismatch> },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => f.write_str("PASS"),
            Verdict::Fail { missing, unexpected } => {
                write!(f, "FAIL missing={} unexpected={}", missing.len(), unexpected.len())?;
                for m in missing {
                    write!(f, "; missing {m}")?;
                }
                for u in unexpected {
                    write!(f, "; unexpected {u}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{file}:{line}: label `{label}` is not defined in the program")]
pub struct DiffError {
    pub file: String,
    pub line: usize,
    pub label: String,
}

/// Compare observed warnings against the manifest's expectations as
/// multisets of `(rule, pc)`, with labels resolved through `image`.
pub fn diff(warnings: &[Warning], manifest: &Manifest, image: &ProgramImage) -> Result<Verdict, DiffError> {
    let mut expected: BTreeMap<(Rule, u32), usize> = BTreeMap::new();
    for e in &manifest.expects {
        let pc = image.symbol(&e.label).ok_or_else(|| DiffError {
            file: format!("{}.manifest", manifest.name),
            line: e.line,
            label: e.label.clone(),
        })?;
        *expected.entry((e.rule, pc)).or_insert(0) += 1;
    }
    let mut observed: BTreeMap<(Rule, u32), usize> = BTreeMap::new();
    for w in warnings {
        *observed.entry((w.rule, w.pc)).or_insert(0) += 1;
    }

    let site = |(rule, pc): (Rule, u32)| Mismatch { rule, pc, label: image.label_at(pc).map(str::to_string) };
    let surplus = |a: &BTreeMap<(Rule, u32), usize>, b: &BTreeMap<(Rule, u32), usize>| {
        a.iter()
            .flat_map(|(&key, &count)| {
                let extra = count.saturating_sub(b.get(&key).copied().unwrap_or(0));
                std::iter::repeat_n(site(key), extra)
            })
            .collect::<Vec<_>>()
    };
    let missing = surplus(&expected, &observed);
    let unexpected = surplus(&observed, &expected);
    if missing.is_empty() && unexpected.is_empty() {
        Ok(Verdict::Pass)
    } else {
        Ok(Verdict::Fail { missing, unexpected })
    }
}
