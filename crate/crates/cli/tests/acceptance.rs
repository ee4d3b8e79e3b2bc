//! Acceptance gate: one `PASS`/`FAIL` line per criterion, non-zero exit on
//! any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shadowsim::checkers::{run_checkers, CheckerOptions, CheckerRegistry, Rule, Warning};
use shadowsim::isa::{assemble, Reg, Width};
use shadowsim::machine::{Event, EventKind, LockId, MachineState, Tid};
use shadowsim::report::{required_entries, run_entries, run_entry, CorpusEntry, Report, RunMeta, Tally};
use shadowsim::session::{analyze, RunResult, SessionConfig};
use shadowsim::shadow::ShadowState;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn entry(name: &str) -> CorpusEntry {
    required_entries().into_iter().find(|e| e.name == name).unwrap_or_else(|| panic!("no corpus entry {name}"))
}

fn run(name: &str) -> Result<(CorpusEntry, RunResult), String> {
    let e = entry(name);
    let image = e.image().map_err(|x| x.to_string())?;
    let result = analyze(&image, &e.config()).map_err(|x| x.to_string())?;
    if !result.outcome.is_clean() {
        return Err(format!("{name}: {}", result.outcome));
    }
    Ok((e, result))
}

fn count(ws: &[Warning], rule: Rule) -> usize {
    ws.iter().filter(|w| w.rule == rule).count()
}

/// `name` emits exactly `expected` warnings of `rule` and nothing else.
fn exactly(name: &str, rule: Rule, expected: usize) -> Outcome {
    let (_, r) = run(name)?;
    let n = count(&r.warnings, rule);
    if n == expected && r.warnings.len() == expected {
        Ok(format!("{name}: {n} {rule}"))
    } else {
        Err(format!("{name}: {n} {rule}, {} warnings in total", r.warnings.len()))
    }
}

/// `name` emits exactly one warning of `rule`, at the label its manifest names.
fn once_at_label(name: &str, rule: Rule) -> Outcome {
    let (e, r) = run(name)?;
    let label = &e.manifest.expects.iter().find(|x| x.rule == rule).ok_or(format!("{name}: no expectation"))?.label;
    let pc = e.image().unwrap().symbol(label).ok_or(format!("{name}: no label {label}"))?;
    match r.warnings.as_slice() {
        [w] if w.rule == rule && w.pc == pc => Ok(format!("{name}: 1 {rule} at {label}")),
        ws => Err(format!("{name}: {} warnings, wanted one {rule} at {label} ({pc:#x})", ws.len())),
    }
}

fn all(parts: impl IntoIterator<Item = Outcome>) -> Outcome {
    let mut notes = Vec::new();
    for p in parts {
        notes.push(p?);
    }
    Ok(notes.join("; "))
}

fn indirection() -> Outcome {
    all([exactly("user_alias_checked", Rule::UserWriteUnchecked, 0), exactly("user_unchecked", Rule::UserWriteUnchecked, 1)])
}

fn poll() -> Outcome {
    let (_, r) = run("poll_read_checked")?;
    let (w, rd) = (count(&r.warnings, Rule::UserWriteUnchecked), count(&r.warnings, Rule::UserReadUnchecked));
    if (w, rd) == (1, 0) {
        Ok(format!("{w} WRITE, {rd} READ"))
    } else {
        Err(format!("{w} WRITE, {rd} READ"))
    }
}

fn irqoff() -> Outcome {
    all([exactly("irqoff_seeded", Rule::UserDerefIrqoff, 1), exactly("irqoff_twin", Rule::UserDerefIrqoff, 0)])
}

fn null() -> Outcome {
    all([
        once_at_label("null_alloc_seeded", Rule::NullDerefUnchecked),
        once_at_label("fd_seeded", Rule::NullDerefUnchecked),
        exactly("null_alloc_checked", Rule::NullDerefUnchecked, 0),
        exactly("null_alias_checked", Rule::NullDerefUnchecked, 0),
        exactly("fd_checked", Rule::NullDerefUnchecked, 0),
    ])
}

fn taint() -> Outcome {
    all([
        once_at_label("fmt_net", Rule::FmtTainted),
        exactly("fmt_literal", Rule::FmtTainted, 0),
        once_at_label("fmt_taint_copy", Rule::FmtTainted),
    ])
}

const WORDS: u32 = 8;
const BASE: u32 = 0x4000;

/// A random trace in which every `Unlock` is by the current holder and every
/// `Lock` takes a free lock. In a disciplined trace, threads usually take a
/// word's guard lock before touching it, so many locksets stay non-empty.
fn random_trace(rng: &mut ChaCha8Rng) -> Vec<Event> {
    let threads: Tid = rng.gen_range(1..=3);
    let locks: LockId = rng.gen_range(1..=4);
    let len = rng.gen_range(1..=200);
    let disciplined = rng.gen_bool(0.5);
    let mut owner: BTreeMap<LockId, Tid> = BTreeMap::new();
    let mut trace = Vec::with_capacity(len);
    for step in 0..len as u64 {
        let tid = rng.gen_range(0..threads);
        let lock = rng.gen_range(1..=locks);
        let kind = match rng.gen_range(0..10) {
            0..=1 if !owner.contains_key(&lock) => {
                owner.insert(lock, tid);
                EventKind::Lock { lock }
            }
            2..=3 if owner.get(&lock) == Some(&tid) => {
                owner.remove(&lock);
                EventKind::Unlock { lock }
            }
            _ => {
                let word = rng.gen_range(0..WORDS);
                let guard = 1 + word % locks;
                if disciplined && owner.get(&guard) != Some(&tid) && rng.gen_bool(0.9) {
                    if owner.contains_key(&guard) {
                        continue;
                    }
                    owner.insert(guard, tid);
                    trace.push(Event { step, tid, pc: 0x1000 + 8 * step as u32, kind: EventKind::Lock { lock: guard } });
                    continue;
                }
                let addr = BASE + 4 * word + rng.gen_range(0..4);
                if rng.gen() {
                    EventKind::MemRead { addr, width: Width::Byte, base: Reg::R1, value: 0 }
                } else {
                    EventKind::MemWrite { addr, width: Width::Byte, base: Reg::R1, src: Reg::R2, value: 0 }
                }
            }
        };
        trace.push(Event { step, tid, pc: 0x1000 + 8 * step as u32, kind });
    }
    trace
}

/// Straightforward restatement: every access intersects the word's set with
/// the locks its thread holds, recomputed from the trace prefix.
fn brute_force(trace: &[Event]) -> BTreeSet<u32> {
    let mut sets: BTreeMap<u32, Option<BTreeSet<LockId>>> = BTreeMap::new();
    let mut warned = BTreeSet::new();
    for (i, e) in trace.iter().enumerate() {
        let Some(a) = e.kind.access() else { continue };
        let mut held = BTreeSet::new();
        for p in &trace[..i] {
            match p.kind {
                EventKind::Lock { lock } if p.tid == e.tid => {
                    held.insert(lock);
                }
                EventKind::Unlock { lock } if p.tid == e.tid => {
                    held.remove(&lock);
                }
                _ => {}
            }
        }
        let v = a.addr & !3;
        let slot = sets.entry(v).or_insert(None);
        let next: BTreeSet<LockId> = match slot {
            None => held,
            Some(set) => set.intersection(&held).copied().collect(),
        };
        if next.is_empty() {
            warned.insert(v);
        }
        *slot = Some(next);
    }
    warned
}

fn lockset_oracle() -> Outcome {
    const TRACES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let machine = MachineState::load(&assemble("HALT").unwrap()).unwrap();
    let shadow = ShadowState::new();
    let registry = CheckerRegistry::builtin();
    let options = CheckerOptions::parse(["lockset.tracked=all"]).unwrap();
    let (mut warned_total, mut clean_total) = (0, 0);
    for i in 0..TRACES {
        let trace = random_trace(&mut rng);
        let mut set = registry.build(&["lockset"], &options).map_err(|e| e.to_string())?;
        let got: BTreeSet<u32> =
            run_checkers(&mut set, &trace, &machine, &shadow).iter().filter_map(|w| w.address).collect();
        let want = brute_force(&trace);
        if got != want {
            return Err(format!("trace {i}: checker {got:x?}, oracle {want:x?}"));
        }
        let touched: BTreeSet<u32> = trace.iter().filter_map(|e| e.kind.access()).map(|a| a.addr & !3).collect();
        warned_total += want.len();
        clean_total += touched.len() - want.len();
    }
    if warned_total == 0 || clean_total == 0 {
        return Err(format!("degenerate traces: {warned_total} warned, {clean_total} clean words"));
    }
    Ok(format!("{TRACES} traces agree, {warned_total} warned and {clean_total} clean words"))
}

fn race() -> Outcome {
    all([exactly("race_seeded", Rule::RaceEmptyLockset, 1), exactly("race_locked", Rule::RaceEmptyLockset, 0)])
}

fn with_events(e: &CorpusEntry, checkers: Option<Vec<String>>) -> Result<RunResult, String> {
    let image = e.image().map_err(|x| x.to_string())?;
    let mut config = SessionConfig { record_events: true, ..e.config() };
    if checkers.is_some() {
        config.checkers = checkers;
    }
    analyze(&image, &config).map_err(|x| x.to_string())
}

fn determinism() -> Outcome {
    let entries = required_entries();
    for e in &entries {
        let (a, b) = (run_entry(e).map_err(|x| x.to_string())?, run_entry(e).map_err(|x| x.to_string())?);
        if a.report != b.report {
            return Err(format!("{}: reports differ", e.name));
        }
        let trace = |r: &RunResult| r.events.iter().map(|ev| format!("{ev}\n")).collect::<String>();
        let (x, y) = (with_events(e, None)?, with_events(e, None)?);
        if trace(&x) != trace(&y) {
            return Err(format!("{}: event traces differ", e.name));
        }
        let meta = RunMeta { image_digest: String::new(), policy: e.manifest.policy.clone(), checkers: vec![] };
        let rx = Report { meta: meta.clone(), warnings: x.warnings }.serialize();
        let ry = Report { meta, warnings: y.warnings }.serialize();
        if rx != ry {
            return Err(format!("{}: warnings differ", e.name));
        }
    }
    Ok(format!("{} entries", entries.len()))
}

fn non_interference() -> Outcome {
    let entries = required_entries();
    for e in &entries {
        let on = with_events(e, Some(CheckerRegistry::builtin().names().into_iter().map(str::to_string).collect()))?;
        let off = with_events(e, Some(Vec::new()))?;
        if on.machine.state_digest() != off.machine.state_digest() || on.machine != off.machine {
            return Err(format!("{}: final state differs", e.name));
        }
    }
    Ok(format!("{} entries", entries.len()))
}

fn false_positive() -> Outcome {
    let e = entry("fmt_sanitized");
    if e.manifest.false_positive_count() != 1 || !e.manifest.expects.iter().all(|x| x.false_positive) {
        return Err("manifest does not mark the warning as a false positive".into());
    }
    let (_, r) = run("fmt_sanitized")?;
    if count(&r.warnings, Rule::FmtTainted) != 1 || r.warnings.len() != 1 {
        return Err(format!("{} warnings", r.warnings.len()));
    }
    let results = run_entries(&required_entries()).map_err(|x| x.to_string())?;
    let tally = Tally::of(&results);
    let fmt_true = results.iter().flat_map(|r| &r.true_rules).filter(|&&rule| rule == Rule::FmtTainted).count();
    if tally.false_positives != 1 || tally.by_rule.get(&Rule::FmtTainted).copied().unwrap_or(0) != fmt_true {
        return Err(format!("tally: {tally}"));
    }
    Ok(format!("1 FMT_TAINTED, tally fp={} true={}", tally.false_positives, tally.kernel_true + tally.application_true))
}

fn corpus_gate() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus");
    let out = Command::new(env!("CARGO_BIN_EXE_shadowsim"))
        .arg("corpus")
        .arg(&dir)
        .output()
        .map_err(|e| e.to_string())?;
    let summary = String::from_utf8_lossy(&out.stdout).lines().find(|l| l.starts_with("entries:")).unwrap_or("").to_string();
    match out.status.code() {
        Some(0) => Ok(summary),
        code => Err(format!("exit {code:?}: {summary}")),
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria: [Criterion; 11] = [
        ("indirection", secs(1), indirection),
        ("poll", secs(1), poll),
        ("irqoff", secs(1), irqoff),
        ("null-check", secs(5), null),
        ("taint", secs(3), taint),
        ("lockset-oracle", secs(30), lockset_oracle),
        ("race", secs(2), race),
        ("determinism", secs(10), determinism),
        ("non-interference", secs(10), non_interference),
        ("false-positive", secs(1), false_positive),
        ("corpus-gate", secs(60), corpus_gate),
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (verdict, note) = match result {
            Ok(_) if took >= limit => ("FAIL", format!("took {took:.2?}, limit {limit:?}")),
            Ok(note) => ("PASS", note),
            Err(note) => ("FAIL", note),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {name} [{took:.2?}] {note}");
    }
    let total = suite.elapsed();
    if total >= secs(60) {
        failed += 1;
        println!("FAIL suite took {total:.2?}, limit 60s");
    }
    println!("{} criteria, {failed} failed, {total:.2?}", 11);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
