//! The program corpus: seeded bug programs, their clean twins, and the
//! manifests pinning what each must report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use super::manifest::{diff, DiffError, Manifest, ManifestError, Verdict};
use super::{Report, RunMeta};
use crate::checkers::{CheckerRegistry, Rule, Warning};
use crate::isa::{assemble, AsmError, ProgramImage};
use crate::machine::Outcome;
use crate::session::{analyze, build_checkers, SessionConfig, SessionError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub name: String,
    pub source: String,
    pub manifest: Manifest,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{name}: {source}")]
    Asm { name: String, source: AsmError },
    #[error("{name}: {source}")]
    Session { name: String, source: SessionError },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{name}: twin `{twin}` {problem}")]
    Twin { name: String, twin: String, problem: &'static str },
}

impl CorpusEntry {
    pub fn image(&self) -> Result<ProgramImage, CorpusError> {
        assemble(&self.source).map_err(|source| CorpusError::Asm { name: self.name.clone(), source })
    }

    /// The pinned run configuration.
    pub fn config(&self) -> SessionConfig {
        let m = &self.manifest;
        let mut config = SessionConfig {
            policy: m.policy.clone(),
            checkers: m.checkers.clone(),
            options: m.options.clone(),
            ..SessionConfig::default()
        };
        if let Some(limit) = m.step_limit {
            config.step_limit = limit;
        }
        config
    }
}

macro_rules! shipped {
    ($($name:literal),* $(,)?) => {
        &[$(
            (
                $name,
                include_str!(concat!("../../corpus/", $name, ".s")),
                include_str!(concat!("../../corpus/", $name, ".manifest")),
            ),
        )*]
    };
}

/// Entry sources compiled into the library.
const SHIPPED: &[(&str, &str, &str)] = shipped![
    "fd_checked",
    "fd_seeded",
    "fmt_literal",
    "fmt_net",
    "fmt_sanitized",
    "fmt_taint_copy",
    "irqoff_seeded",
    "irqoff_twin",
    "lockset_single_thread",
    "null_alias_checked",
    "null_alloc_checked",
    "null_alloc_seeded",
    "null_and_race",
    "poll_read_checked",
    "race_locked",
    "race_seeded",
    "user_alias_checked",
    "user_unchecked",
];

/// The shipped corpus, in name order.
pub fn required_entries() -> Vec<CorpusEntry> {
    SHIPPED
        .iter()
        .map(|&(name, source, manifest)| CorpusEntry {
            name: name.to_string(),
            source: source.to_string(),
            manifest: Manifest::parse(name, &format!("{name}.manifest"), manifest)
                .expect("shipped manifests parse"),
        })
        .collect()
}

/// Load every `*.manifest` in `dir` with its program.
pub fn load_dir(dir: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "manifest"))
        .collect();
    manifests.sort();
    let mut entries = Vec::new();
    for path in manifests {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        let manifest = Manifest::parse(&name, &path.display().to_string(), &text)?;
        let program = dir.join(&manifest.program);
        let source = std::fs::read_to_string(&program).map_err(io(&program))?;
        entries.push(CorpusEntry { name, source, manifest });
    }
    check_twins(&entries)?;
    Ok(entries)
}

/// Every named twin must exist, expect nothing, and run every checker.
pub fn check_twins(entries: &[CorpusEntry]) -> Result<(), CorpusError> {
    for entry in entries {
        let Some(twin) = &entry.manifest.twin else { continue };
        let problem = match entries.iter().find(|e| &e.name == twin) {
            None => Some("does not exist"),
            Some(t) if !t.manifest.expects.is_empty() => Some("has expectations"),
            Some(t) if t.manifest.checkers.is_some() => Some("restricts checkers"),
            Some(_) => None,
        };
        if let Some(problem) = problem {
            return Err(CorpusError::Twin { name: entry.name.clone(), twin: twin.clone(), problem });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EntryResult {
    pub name: String,
    pub outcome: Outcome,
    pub verdict: Verdict,
    pub warnings: Vec<Warning>,
    pub report: String,
    pub true_positives: usize,
    pub false_positives: usize,
    /// Rules of the non-false-positive expectations.
    pub true_rules: Vec<Rule>,
}

impl EntryResult {
    /// The run terminated normally and the warnings match the manifest.
    pub fn passed(&self) -> bool {
        self.outcome.is_clean() && self.verdict.is_pass()
    }
}

impl fmt::Display for EntryResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({} warnings", self.name, self.warnings.len())?;
        if self.false_positives > 0 {
            write!(f, ", {} expected false positive", self.false_positives)?;
        }
        f.write_str(")")?;
        if !self.outcome.is_clean() {
            write!(f, ": {}", self.outcome)?;
        }
        if let Verdict::Fail { .. } = self.verdict {
            write!(f, ": {}", self.verdict)?;
        }
        Ok(())
    }
}

pub fn run_entry(entry: &CorpusEntry) -> Result<EntryResult, CorpusError> {
    let session = |source| CorpusError::Session { name: entry.name.clone(), source };
    let image = entry.image()?;
    let config = entry.config();
    let result = analyze(&image, &config).map_err(session)?;
    let verdict = diff(&result.warnings, &entry.manifest, &image)?;
    let checkers = build_checkers(&CheckerRegistry::builtin(), &config)
        .map_err(|e| session(e.into()))?
        .names()
        .into_iter()
        .map(str::to_string)
        .collect();
    let report = Report {
        meta: RunMeta { image_digest: image.digest(), policy: config.policy.clone(), checkers },
        warnings: result.warnings.clone(),
    }
    .serialize();
    let false_positives = entry.manifest.false_positive_count();
    let true_rules: Vec<Rule> = entry.manifest.expects.iter().filter(|e| !e.false_positive).map(|e| e.rule).collect();
    Ok(EntryResult {
        name: entry.name.clone(),
        outcome: result.outcome,
        verdict,
        warnings: result.warnings,
        report,
        true_positives: true_rules.len(),
        false_positives,
        true_rules,
    })
}

/// Run entries in parallel; results come back in name order.
pub fn run_entries(entries: &[CorpusEntry]) -> Result<Vec<EntryResult>, CorpusError> {
    let mut results = entries.par_iter().map(run_entry).collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(results)
}

/// Corpus-level summary. Only passing entries contribute findings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    pub entries: usize,
    pub passed: usize,
    /// Confirmed findings of the user/kernel pointer rules.
    pub kernel_true: usize,
    /// Confirmed findings of every other rule.
    pub application_true: usize,
    pub false_positives: usize,
    pub by_rule: BTreeMap<Rule, usize>,
}

impl Tally {
    pub fn of(results: &[EntryResult]) -> Tally {
        let mut tally = Tally { entries: results.len(), ..Tally::default() };
        for r in results.iter().filter(|r| r.passed()) {
            tally.passed += 1;
            tally.false_positives += r.false_positives;
            for &rule in &r.true_rules {
                *tally.by_rule.entry(rule).or_insert(0) += 1;
                if is_kernel_rule(rule) {
                    tally.kernel_true += 1;
                } else {
                    tally.application_true += 1;
                }
            }
        }
        tally
    }

    pub fn all_passed(&self) -> bool {
        self.passed == self.entries
    }
}

fn is_kernel_rule(rule: Rule) -> bool {
    matches!(rule, Rule::UserReadUnchecked | Rule::UserWriteUnchecked | Rule::UserDerefIrqoff)
}

impl fmt::Display for Tally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entries: {} passed: {}", self.entries, self.passed)?;
        writeln!(f, "true positives: kernel {} application {}", self.kernel_true, self.application_true)?;
        for (rule, n) in &self.by_rule {
            writeln!(f, "  {rule}: {n}")?;
        }
        write!(f, "expected false positives: {}", self.false_positives)
    }
}
