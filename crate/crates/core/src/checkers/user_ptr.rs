use crate::machine::{Event, MachineState, Mode};
use crate::shadow::{ShadowState, Tags};

use super::{Checker, Rule, Warning};

/// User/kernel pointer discipline.
///
/// In kernel mode, a value tagged as an unchecked user value may only be
/// dereferenced after the matching copyin/copyout-style check (read check
/// for loads, write check for stores), and never with interrupts disabled,
/// checked or not.
#[derive(Debug, Default)]
pub struct UserChecker;

impl UserChecker {
    pub const NAME: &'static str = "user";

    pub fn new() -> Self {
        UserChecker
    }
}

impl Checker for UserChecker {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_event(&mut self, event: &Event, machine: &MachineState, shadow: &ShadowState, out: &mut Vec<Warning>) {
        let Some(access) = event.kind.access() else { return };
        let Some(thread) = machine.thread(event.tid) else { return };
        if thread.mode != Mode::Kernel {
            return;
        }
        let id = shadow.reg(event.tid, access.base);
        let obj = shadow.object(id);
        if !obj.tags.contains(Tags::USER_UNCHECKED) {
            return;
        }

        let mut warn = |rule: Rule, detail: String| {
            out.push(Warning {
                checker: Self::NAME.to_string(),
                rule,
                tid: event.tid,
                pc: event.pc,
                step: event.step,
                address: Some(access.addr),
                object: Some(id),
                detail,
            })
        };

        let (needed, rule, verb) = if access.is_write {
            (Tags::USER_WRITE_CHECKED, Rule::UserWriteUnchecked, "write")
        } else {
            (Tags::USER_READ_CHECKED, Rule::UserReadUnchecked, "read")
        };
        if !obj.tags.contains(needed) {
            warn(
                rule,
                format!(
                    "kernel {verb} of user address {:#x} via {} holding {} ({})",
                    access.addr, access.base, obj.tags, obj.note
                ),
            );
        }
        if !thread.iflag {
            warn(
                Rule::UserDerefIrqoff,
                format!(
                    "user address {:#x} dereferenced via {} with interrupts disabled ({})",
                    access.addr, access.base, obj.note
                ),
            );
        }
    }

    fn reset(&mut self) {}
}
