//! One analysed run: machine, shadow and checkers wired together.

use thiserror::Error;

use crate::checkers::{CheckerError, CheckerOptions, CheckerRegistry, CheckerSet, Warning};
use crate::isa::ProgramImage;
use crate::machine::{
    self, Event, LoadError, MachineState, Observer, Outcome, PolicyError, SchedulerPolicy,
    DEFAULT_NET_SEED,
};
use crate::shadow::ShadowState;

pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub policy: SchedulerPolicy,
    pub step_limit: u64,
    /// Checker names, in delivery order. `None` selects every registered checker.
    pub checkers: Option<Vec<String>>,
    pub options: CheckerOptions,
    pub net_seed: u8,
    pub record_events: bool,
    pub shadow_trace: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            policy: SchedulerPolicy::default(),
            step_limit: DEFAULT_STEP_LIMIT,
            checkers: None,
            options: CheckerOptions::new(),
            net_seed: DEFAULT_NET_SEED,
            record_events: false,
            shadow_trace: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checker(#[from] CheckerError),
}

#[derive(Debug)]
pub struct RunResult {
    pub outcome: Outcome,
    pub machine: MachineState,
    pub warnings: Vec<Warning>,
    /// Empty unless `record_events` was set.
    pub events: Vec<Event>,
    pub shadow: ShadowState,
    /// Empty unless `shadow_trace` was set.
    pub shadow_trace: Vec<String>,
}

/// Observer that runs checkers and then shadow propagation for every event.
///
/// Checkers see the shadow as it was before the event is applied, and the
/// machine as it is after the whole step.
pub struct Analysis {
    pub checkers: CheckerSet,
    pub shadow: ShadowState,
    pub warnings: Vec<Warning>,
    pub events: Option<Vec<Event>>,
    pub shadow_trace: Option<Vec<String>>,
}

impl Analysis {
    pub fn new(checkers: CheckerSet) -> Self {
        Analysis {
            checkers,
            shadow: ShadowState::new(),
            warnings: Vec::new(),
            events: None,
            shadow_trace: None,
        }
    }
}

impl Observer for Analysis {
    fn on_step(&mut self, machine: &MachineState, events: &[Event]) {
        for event in events {
            self.checkers.on_event(event, machine, &self.shadow, &mut self.warnings);
            self.shadow.on_event(event);
        }
        let touched = self.shadow.take_touched();
        if let (Some(trace), Some(first)) = (&mut self.shadow_trace, events.first()) {
            if !touched.is_empty() {
                trace.push(format!("# step {} tid {} pc {:#06x}", first.step, first.tid, first.pc));
                trace.extend(self.shadow.describe(&touched));
            }
        }
        if let Some(log) = &mut self.events {
            log.extend_from_slice(events);
        }
    }
}

/// Build the checker set named by `config`.
pub fn build_checkers(registry: &CheckerRegistry, config: &SessionConfig) -> Result<CheckerSet, CheckerError> {
    match &config.checkers {
        None => registry.build_all(&config.options),
        Some(names) => {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            registry.build(&names, &config.options)
        }
    }
}

/// Run `image` under `config` with the builtin checkers.
pub fn analyze(image: &ProgramImage, config: &SessionConfig) -> Result<RunResult, SessionError> {
    analyze_with(&CheckerRegistry::builtin(), image, config)
}

pub fn analyze_with(
    registry: &CheckerRegistry,
    image: &ProgramImage,
    config: &SessionConfig,
) -> Result<RunResult, SessionError> {
    let mut scheduler = config.policy.build()?;
    let checkers = build_checkers(registry, config)?;
    let mut machine = MachineState::load_with_net_seed(image, config.net_seed)?;

    let mut analysis = Analysis::new(checkers);
    if config.record_events {
        analysis.events = Some(Vec::new());
    }
    if config.shadow_trace {
        analysis.shadow_trace = Some(Vec::new());
    }
    let outcome = machine::run(&mut machine, scheduler.as_mut(), config.step_limit, &mut analysis);
    Ok(RunResult {
        outcome,
        machine,
        warnings: analysis.warnings,
        events: analysis.events.unwrap_or_default(),
        shadow: analysis.shadow,
        shadow_trace: analysis.shadow_trace.unwrap_or_default(),
    })
}

/// Run without shadow or checkers.
pub fn execute(
    image: &ProgramImage,
    config: &SessionConfig,
    observer: &mut dyn Observer,
) -> Result<(Outcome, MachineState), SessionError> {
    let mut scheduler = config.policy.build()?;
    let mut machine = MachineState::load_with_net_seed(image, config.net_seed)?;
    let outcome = machine::run(&mut machine, scheduler.as_mut(), config.step_limit, observer);
    Ok((outcome, machine))
}
