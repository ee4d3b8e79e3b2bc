//! Warning reports, expectation manifests and the program corpus.
//!
//! A report is UTF-8 text: one `#` header line with run metadata, then one
//! tab-separated line per warning in the order the warnings were raised:
//!
//! ```text
//! # image=<sha256> sched=<kind> seed=<n> quantum=<n> checkers=<a,b,..>
//! <RULE>\t<checker>\t<step>\t<tid>\t<pc>\t<address|->\t<object|->\t<detail>
//! ```
//!
//! `pc` and `address` are `0x`-prefixed hex. Backslash, tab, CR and LF in
//! `detail` are escaped as `\\`, `\t`, `\r`, `\n`.

pub mod corpus;
pub mod manifest;

use std::fmt::Write as _;

use thiserror::Error;

use crate::checkers::{Rule, Warning};
use crate::machine::SchedulerPolicy;
use crate::shadow::ObjectId;

pub use corpus::{
    load_dir, required_entries, run_entries, run_entry, CorpusEntry, CorpusError, EntryResult, Tally,
};
pub use manifest::{diff, DiffError, Expectation, Manifest, ManifestError, Mismatch, Verdict};

/// Run metadata carried in the report header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub image_digest: String,
    pub policy: SchedulerPolicy,
    pub checkers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub meta: RunMeta,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("report line {line}: {message}")]
pub struct ReportParseError {
    pub line: usize,
    pub message: String,
}

const FIELDS: usize = 8;

impl Report {
    pub fn serialize(&self) -> String {
        let m = &self.meta;
        let mut out = format!(
            "# image={} sched={} seed={} quantum={} checkers={}\n",
            m.image_digest,
            m.policy.kind,
            m.policy.seed,
            m.policy.quantum,
            m.checkers.join(",")
        );
        for w in &self.warnings {
            let address = w.address.map_or("-".to_string(), |a| format!("{a:#x}"));
            let object = w.object.map_or("-".to_string(), |o| o.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:#x}\t{}\t{}\t{}",
                w.rule,
                w.checker,
                w.step,
                w.tid,
                w.pc,
                address,
                object,
                escape(&w.detail)
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Report, ReportParseError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, message: String| ReportParseError { line, message };

        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| err(1, "header must start with `# `".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for pair in header.split(' ') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| err(1, format!("malformed header field `{pair}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(1, format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<u64, ReportParseError> {
            get(k)?.parse().map_err(|_| err(1, format!("bad `{k}`")))
        };
        let checkers = get("checkers")?;
        let meta = RunMeta {
            image_digest: get("image")?.to_string(),
            policy: SchedulerPolicy {
                kind: get("sched")?.to_string(),
                seed: num("seed")?,
                quantum: u32::try_from(num("quantum")?).map_err(|_| err(1, "bad `quantum`".into()))?,
            },
            checkers: if checkers.is_empty() {
                Vec::new()
            } else {
                checkers.split(',').map(str::to_string).collect()
            },
        };

        let mut warnings = Vec::new();
        for (n, line) in lines {
            let cols: Vec<&str> = line.splitn(FIELDS, '\t').collect();
            if cols.len() != FIELDS {
                return Err(err(n, format!("expected {FIELDS} tab-separated fields")));
            }
            let bad = |what: &str| err(n, format!("bad {what} `{}`", cols[field_index(what)]));
            warnings.push(Warning {
                rule: cols[0].parse().map_err(|_| bad("rule"))?,
                checker: cols[1].to_string(),
                step: cols[2].parse().map_err(|_| bad("step"))?,
                tid: cols[3].parse().map_err(|_| bad("tid"))?,
                pc: parse_hex(cols[4]).ok_or_else(|| bad("pc"))?,
                address: match cols[5] {
                    "-" => None,
                    s => Some(parse_hex(s).ok_or_else(|| bad("address"))?),
                },
                object: match cols[6] {
                    "-" => None,
                    s => Some(ObjectId(s.parse().map_err(|_| bad("object"))?)),
                },
                detail: unescape(cols[7]).ok_or_else(|| bad("detail"))?,
            });
        }
        Ok(Report { meta, warnings })
    }
}

fn field_index(name: &str) -> usize {
    ["rule", "checker", "step", "tid", "pc", "address", "object", "detail"]
        .iter()
        .position(|&f| f == name)
        .unwrap_or(0)
}

fn parse_hex(s: &str) -> Option<u32> {
    u32::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

/// Rule counts, for summaries.
pub fn count_by_rule(warnings: &[Warning]) -> std::collections::BTreeMap<Rule, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for w in warnings {
        *counts.entry(w.rule).or_insert(0) += 1;
    }
    counts
}
