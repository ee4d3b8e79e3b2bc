//! `shadowsim` command-line front end.
//!
//! Every command returns its exit status instead of exiting, so the whole
//! surface can be driven in-process from tests.
//!
//! | status | meaning |
//! |---|---|
//! | 0 | success, no warnings |
//! | 1 | assembly error, or a corpus entry failed |
//! | 2 | I/O error or bad configuration |
//! | 3 | `check` emitted warnings |
//! | 4 | guest fault or step limit reached |

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use shadowsim::checkers::{CheckerOptions, CheckerRegistry};
use shadowsim::isa::{assemble, ProgramImage};
use shadowsim::machine::{EventLog, Outcome, SchedulerPolicy};
use shadowsim::report::{load_dir, run_entries, Report, RunMeta, Tally};
use shadowsim::session::{analyze, execute, SessionConfig, DEFAULT_STEP_LIMIT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASM: i32 = 1;
pub const EXIT_CORPUS_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_WARNINGS: i32 = 3;
pub const EXIT_GUEST: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "shadowsim", version, about = "Shadow-state simulator and rule checker for a toy 32-bit ISA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble a source file into an image.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run an image without analysis.
    Run {
        image: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Run an image with the shadow state and checkers attached.
    Check {
        image: PathBuf,
        #[command(flatten)]
        exec: ExecArgs,
        /// Comma-separated checker names; empty selects none. Default: all.
        #[arg(long)]
        checkers: Option<String>,
        /// Checker option `key=value`; repeatable.
        #[arg(long = "option", value_name = "KEY=VALUE")]
        options: Vec<String>,
        /// Report destination; standard output when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-step shadow cell dump.
        #[arg(long, value_name = "FILE")]
        shadow_trace: Option<PathBuf>,
    },
    /// Check every entry of a corpus directory against its manifest.
    Corpus { dir: PathBuf },
    /// List registered checkers and schedulers.
    List,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    #[arg(long, default_value = "round-robin")]
    pub sched: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub quantum: u32,
    #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
    pub steps: u64,
    /// Event trace destination (`-` for standard output).
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

/// Parse `args` (program name first) and run the command.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli.command, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            code
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match command {
        Command::Asm { source, output } => cmd_asm(&source, &output, out, err),
        Command::Run { image, exec } => cmd_run(&image, &exec, out, err),
        Command::Check { image, exec, checkers, options, report, shadow_trace } => {
            let check = CheckArgs { checkers, options, report, shadow_trace };
            cmd_check(&image, &exec, &check, out, err)
        }
        Command::Corpus { dir } => cmd_corpus(&dir, out, err),
        Command::List => cmd_list(out),
    }
}

pub fn cmd_asm(source: &Path, output: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let text = match fs::read_to_string(source) {
        Ok(t) => t,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{}: {e}", source.display())),
    };
    let image = match assemble(&text) {
        Ok(i) => i,
        Err(e) => return fail(err, EXIT_ASM, format_args!("{}:{e}", source.display())),
    };
    if let Err(e) = fs::write(output, image.to_bytes()) {
        return fail(err, EXIT_USAGE, format_args!("{}: {e}", output.display()));
    }
    let _ = writeln!(
        out,
        "{}: {} bytes at {:#06x}, entry {:#06x}, sha256 {}",
        output.display(),
        image.payload.len(),
        image.origin,
        image.entry,
        image.digest()
    );
    EXIT_OK
}

pub fn cmd_run(image: &Path, exec: &ExecArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (image, config) = match prepare(image, exec, err) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let mut log = EventLog::default();
    let (outcome, machine) = match execute(&image, &config, &mut log) {
        Ok(v) => v,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };
    if let Some(path) = &exec.trace {
        if let Err(code) = write_lines(path, log.0.iter().map(|e| e.to_string()), out, err) {
            return code;
        }
    }
    let _ = out.write_all(&machine.output);
    finish(err, &outcome, machine.step_count, &machine.state_digest(), EXIT_OK)
}

/// `check`-only flags.
#[derive(Debug, Default)]
pub struct CheckArgs {
    pub checkers: Option<String>,
    pub options: Vec<String>,
    pub report: Option<PathBuf>,
    pub shadow_trace: Option<PathBuf>,
}

pub fn cmd_check(image_path: &Path, exec: &ExecArgs, check: &CheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (image, mut config) = match prepare(image_path, exec, err) {
        Ok(v) => v,
        Err(code) => return code,
    };
    config.checkers = check
        .checkers
        .as_ref()
        .map(|list| list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect());
    config.options = match CheckerOptions::parse(check.options.iter().map(String::as_str)) {
        Ok(o) => o,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };
    config.record_events = exec.trace.is_some();
    config.shadow_trace = check.shadow_trace.is_some();

    // Names and options are validated here, before the guest runs.
    let registry = CheckerRegistry::builtin();
    let names = match shadowsim::session::build_checkers(&registry, &config) {
        Ok(set) => set.names().into_iter().map(str::to_string).collect(),
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };
    let result = match analyze(&image, &config) {
        Ok(r) => r,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };

    if let Some(path) = &exec.trace {
        if let Err(code) = write_lines(path, result.events.iter().map(|e| e.to_string()), out, err) {
            return code;
        }
    }
    if let Some(path) = &check.shadow_trace {
        if let Err(code) = write_lines(path, result.shadow_trace.iter().cloned(), out, err) {
            return code;
        }
    }
    let report = Report {
        meta: RunMeta { image_digest: image.digest(), policy: config.policy.clone(), checkers: names },
        warnings: result.warnings.clone(),
    }
    .serialize();
    match &check.report {
        Some(path) => {
            if let Err(e) = fs::write(path, &report) {
                return fail(err, EXIT_USAGE, format_args!("{}: {e}", path.display()));
            }
        }
        None => {
            let _ = out.write_all(report.as_bytes());
        }
    }
    let _ = writeln!(err, "warnings: {}", result.warnings.len());
    let clean = if result.warnings.is_empty() { EXIT_OK } else { EXIT_WARNINGS };
    finish(err, &result.outcome, result.machine.step_count, &result.machine.state_digest(), clean)
}

pub fn cmd_corpus(dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let entries = match load_dir(dir) {
        Ok(e) => e,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };
    let results = match run_entries(&entries) {
        Ok(r) => r,
        Err(e) => return fail(err, EXIT_USAGE, format_args!("{e}")),
    };
    for r in &results {
        let _ = writeln!(out, "{r}");
    }
    let tally = Tally::of(&results);
    let _ = writeln!(out, "{tally}");
    if tally.all_passed() {
        EXIT_OK
    } else {
        EXIT_CORPUS_FAIL
    }
}

pub fn cmd_list(out: &mut dyn Write) -> i32 {
    let _ = writeln!(out, "checkers:");
    for (name, summary) in CheckerRegistry::builtin().summaries() {
        let _ = writeln!(out, "  {name:<8} {summary}");
    }
    let _ = writeln!(out, "schedulers: {}", shadowsim::machine::sched::names().join(", "));
    EXIT_OK
}

fn prepare(path: &Path, exec: &ExecArgs, err: &mut dyn Write) -> Result<(ProgramImage, SessionConfig), i32> {
    let policy = SchedulerPolicy::new(&exec.sched, exec.quantum, exec.seed)
        .map_err(|e| fail(err, EXIT_USAGE, format_args!("{e}")))?;
    let bytes = fs::read(path).map_err(|e| fail(err, EXIT_USAGE, format_args!("{}: {e}", path.display())))?;
    let image = ProgramImage::from_bytes(&bytes)
        .map_err(|e| fail(err, EXIT_USAGE, format_args!("{}: {e}", path.display())))?;
    let config = SessionConfig { policy, step_limit: exec.steps, ..SessionConfig::default() };
    Ok((image, config))
}

fn write_lines(
    path: &Path,
    lines: impl Iterator<Item = String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), i32> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&line);
        text.push('\n');
    }
    if path == Path::new("-") {
        let _ = out.write_all(text.as_bytes());
        return Ok(());
    }
    fs::write(path, text).map_err(|e| fail(err, EXIT_USAGE, format_args!("{}: {e}", path.display())))
}

fn finish(err: &mut dyn Write, outcome: &Outcome, steps: u64, digest: &str, clean: i32) -> i32 {
    let _ = writeln!(err, "outcome: {outcome} after {steps} steps");
    let _ = writeln!(err, "state: {digest}");
    if outcome.is_clean() {
        clean
    } else {
        EXIT_GUEST
    }
}

fn fail(err: &mut dyn Write, code: i32, message: std::fmt::Arguments<'_>) -> i32 {
    let _ = writeln!(err, "error: {message}");
    code
}

/// Convenience for `main`.
pub fn main_stdio() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    main_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
