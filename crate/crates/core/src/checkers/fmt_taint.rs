use crate::machine::syscall::{PRINTF, PRINTF_CAP};
use crate::machine::{Event, EventKind, MachineState};
use crate::shadow::{ShadowState, Tags};

use super::{Checker, Rule, Warning};

/// Flags `PRINTF` calls whose format string contains bytes derived from an
/// untrusted source.
#[derive(Debug, Default)]
pub struct FmtChecker;

impl FmtChecker {
    pub const NAME: &'static str = "fmt";

    pub fn new() -> Self {
        FmtChecker
    }
}

impl Checker for FmtChecker {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_event(&mut self, event: &Event, machine: &MachineState, shadow: &ShadowState, out: &mut Vec<Warning>) {
        let EventKind::Syscall { number: PRINTF, args } = event.kind else { return };
        let start = args[0];
        let (text, terminated) = machine.c_string(start, PRINTF_CAP);

        // Bytes still inside a registered source range count as tainted even
        // if no load has pulled them through the shadow yet.
        let first_tainted = (0..text.len() as u32)
            .map(|i| start + i)
            .find(|&addr| shadow.tags(shadow.mem(addr)).contains(Tags::TAINTED) || shadow.is_taint_source(addr));
        let Some(addr) = first_tainted else { return };

        let id = shadow.mem(addr);
        let mut detail = format!(
            "format string at {start:#x} has tainted byte at {addr:#x} (offset {}; {})",
            addr - start,
            shadow.object(id).note
        );
        if !terminated {
            detail.push_str(&format!("; scan truncated after {} bytes without NUL", text.len()));
        }
        out.push(Warning {
            checker: Self::NAME.to_string(),
            rule: Rule::FmtTainted,
            tid: event.tid,
            pc: event.pc,
            step: event.step,
            address: Some(addr),
            object: Some(id),
            detail,
        });
    }

    fn reset(&mut self) {}
}
