use crate::machine::{Event, MachineState};
use crate::shadow::{ShadowState, Tags};

use super::{Checker, Rule, Warning};

/// Flags dereferences through allocation or descriptor results that were
/// never compared against zero.
#[derive(Debug, Default)]
pub struct NullChecker;

impl NullChecker {
    pub const NAME: &'static str = "null";

    pub fn new() -> Self {
        NullChecker
    }
}

impl Checker for NullChecker {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn on_event(&mut self, event: &Event, _: &MachineState, shadow: &ShadowState, out: &mut Vec<Warning>) {
        let Some(access) = event.kind.access() else { return };
        let id = shadow.reg(event.tid, access.base);
        let obj = shadow.object(id);
        if !obj.tags.intersects(Tags::NEEDS_NULL_CHECK) || obj.tags.contains(Tags::NULL_CHECKED) {
            return;
        }
        let what = if access.is_write { "store to" } else { "load from" };
        out.push(Warning {
            checker: Self::NAME.to_string(),
            rule: Rule::NullDerefUnchecked,
            tid: event.tid,
            pc: event.pc,
            step: event.step,
            address: Some(access.addr),
            object: Some(id),
            detail: format!(
                "{what} {:#x} via {} holding {} ({}) with no null check",
                access.addr, access.base, obj.tags, obj.note
            ),
        });
    }

    fn reset(&mut self) {}
}
