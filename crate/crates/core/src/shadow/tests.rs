use proptest::prelude::*;

use super::*;
use crate::isa::assemble;
use crate::machine::{self, MachineState, Observer, SchedulerPolicy};

struct Propagate(ShadowState);

impl Observer for Propagate {
    fn on_step(&mut self, _: &MachineState, events: &[Event]) {
        for e in events {
            self.0.on_event(e);
        }
    }
}

fn run(src: &str) -> (MachineState, ShadowState) {
    let image = assemble(src).unwrap();
    let mut machine = MachineState::load(&image).unwrap();
    let mut sched = SchedulerPolicy::default().build().unwrap();
    let mut obs = Propagate(ShadowState::new());
    let outcome = machine::run(&mut machine, sched.as_mut(), 10_000, &mut obs);
    assert!(outcome.is_clean(), "{outcome:?}");
    (machine, obs.0)
}

const KERNEL_PRELUDE: &str = "
start:
    MOVI r0, handler
    SYS 18
    MOVI r0, 0x3000
    MOVI r1, 4
    SYS 16
    HALT
handler:
";

#[test]
fn check_through_one_alias_reaches_the_other() {
    // The copy is taken before the check; the check must still be visible
    // through the copy.
    let src = format!("{KERNEL_PRELUDE}    MOV r4, r0\n    SYS 33\n    MOV r5, r4\n    SYS 17\n");
    let (_, shadow) = run(&src);
    let r4 = shadow.reg(0, Reg::new(4).unwrap());
    assert_eq!(r4, shadow.reg(0, Reg::R0));
    assert!(shadow.tags(r4).contains(Tags::USER_UNCHECKED | Tags::USER_WRITE_CHECKED));
    assert!(!shadow.tags(r4).contains(Tags::USER_READ_CHECKED));
    assert_eq!(shadow.reg(0, Reg::R5), r4);
}

#[test]
fn kcall_arguments_are_distinct_objects() {
    let src = format!("{KERNEL_PRELUDE}    SYS 17\n");
    let (_, shadow) = run(&src);
    let ids: Vec<_> = [Reg::R0, Reg::R1, Reg::R2, Reg::R3].iter().map(|&r| shadow.reg(0, r)).collect();
    for (i, a) in ids.iter().enumerate() {
        assert_eq!(shadow.tags(*a), Tags::USER_UNCHECKED);
        for b in &ids[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn movi_severs_alias() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOV r1, r0\nMOVI r1, 0\nHALT");
    assert_eq!(shadow.reg(0, Reg::R1), ObjectId::UNTAGGED);
    assert_eq!(shadow.reg_tags(0, Reg::R0), Tags::ALLOC_UNCHECKED);
}

#[test]
fn add_with_untagged_offset_keeps_the_pointer_object() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOVI r2, 4\nADD r1, r0, r2\nCMPI r1, 0\nHALT");
    assert_eq!(shadow.reg(0, Reg::R1), shadow.reg(0, Reg::R0));
    assert!(shadow.reg_tags(0, Reg::R0).contains(Tags::NULL_CHECKED));
}

#[test]
fn combining_two_tagged_objects_makes_a_fresh_union() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOV r3, r0\nMOVI r0, 0\nSYS 34\nADD r4, r0, r3\nHALT");
    let r4 = shadow.reg(0, Reg::new(4).unwrap());
    assert_ne!(r4, shadow.reg(0, Reg::R0));
    assert_ne!(r4, shadow.reg(0, Reg::R3));
    assert_eq!(shadow.tags(r4), Tags::ALLOC_UNCHECKED | Tags::TAINTED);
}

#[test]
fn self_xor_and_self_sub_clear() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOV r1, r0\nXOR r0, r0, r0\nSUB r1, r1, r1\nHALT");
    assert_eq!(shadow.reg(0, Reg::R0), ObjectId::UNTAGGED);
    assert_eq!(shadow.reg(0, Reg::R1), ObjectId::UNTAGGED);
}

#[test]
fn store_then_load_carries_the_handle() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOVI r2, 0x4000\nST [r2], r0\nLD r3, [r2]\nHALT");
    let obj = shadow.reg(0, Reg::R0);
    for a in 0x4000..0x4004 {
        assert_eq!(shadow.mem(a), obj);
    }
    assert_eq!(shadow.reg(0, Reg::R3), obj);
}

#[test]
fn null_check_on_a_reloaded_copy_marks_the_original() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nMOVI r2, 0x4000\nST [r2], r0\nLD r3, [r2]\nCMPI r3, 0\nHALT");
    assert!(shadow.reg_tags(0, Reg::R0).contains(Tags::NULL_CHECKED));
}

#[test]
fn nonzero_compare_is_not_a_null_check() {
    let (_, shadow) = run("MOVI r0, 8\nSYS 1\nCMPI r0, 1\nHALT");
    assert!(!shadow.reg_tags(0, Reg::R0).contains(Tags::NULL_CHECKED));
}

#[test]
fn read_net_taints_the_buffer() {
    let (_, shadow) = run("MOVI r0, 0x4000\nMOVI r1, 3\nSYS 3\nLDB r2, [r0+1]\nHALT");
    assert!(shadow.reg_tags(0, Reg::R2).contains(Tags::TAINTED));
    assert_eq!(shadow.mem(0x4003), ObjectId::UNTAGGED);
}

#[test]
fn untrusted_source_taints_on_read() {
    let (_, shadow) = run("MOVI r0, 0x4000\nMOVI r1, 4\nSYS 35\nLDB r2, [r0]\nLDB r3, [r0+8]\nHALT");
    assert!(shadow.reg_tags(0, Reg::R2).contains(Tags::TAINTED));
    assert_eq!(shadow.reg(0, Reg::R3), ObjectId::UNTAGGED);
    assert!(shadow.is_taint_source(0x4003) && !shadow.is_taint_source(0x4004));
}

#[test]
fn spawned_thread_starts_untagged() {
    let src = "start: MOVI r0, 8\nSYS 1\nMOVI r0, child\nMOVI r1, 0xe000\nSYS 48\nHALT\nchild: SYS 52\n";
    let (_, shadow) = run(src);
    for r in Reg::all() {
        assert_eq!(shadow.reg(1, r), ObjectId::UNTAGGED);
    }
}

#[test]
fn untagged_object_cannot_be_tagged() {
    let mut s = ShadowState::new();
    assert!(!s.add_tag(ObjectId::UNTAGGED, Tags::TAINTED));
    assert!(s.tags(ObjectId::UNTAGGED).is_empty());
}

#[test]
fn touched_cells_and_description() {
    let (_, mut shadow) = run("HALT");
    assert!(shadow.take_touched().is_empty());
    let id = shadow.fresh(
        Tags::ALLOC_UNCHECKED,
        Origin { pc: 0, tid: 0, step: 0 },
        "x".into(),
    );
    shadow.set_mem(0x10, 2, id);
    let cells = shadow.take_touched();
    assert_eq!(cells, [Cell::Mem(0x10), Cell::Mem(0x11)]);
    assert_eq!(shadow.describe(&cells[..1]), ["cell 0x0010 -> object 1 tags {ALLOC_UNCHECKED}"]);
}

// Straight-line programs over r0..r4 with a fixed buffer base in r5.

const BUF: u32 = 0x4000;
const BUF_LEN: u32 = 32;

#[derive(Debug, Clone)]
enum Op {
    Movi(u8, i32),
    Mov(u8, u8),
    Alu(&'static str, u8, u8, u8),
    Load(u8, u32, bool),
    Store(u8, u32, bool),
    Alloc,
    Taint(u8),
    Source(u32),
    NullCheck(u8),
}

fn op() -> impl Strategy<Value = Op> {
    let r = 0u8..5;
    prop_oneof![
        (r.clone(), -4i32..64).prop_map(|(d, i)| Op::Movi(d, i)),
        (r.clone(), r.clone()).prop_map(|(d, s)| Op::Mov(d, s)),
        (prop::sample::select(vec!["ADD", "SUB", "MUL", "AND", "OR", "XOR"]), r.clone(), r.clone(), r.clone())
            .prop_map(|(o, d, s, t)| Op::Alu(o, d, s, t)),
        (r.clone(), 0..BUF_LEN / 4, any::<bool>()).prop_map(|(d, w, b)| Op::Load(d, w * 4, b)),
        (r.clone(), 0..BUF_LEN / 4, any::<bool>()).prop_map(|(s, w, b)| Op::Store(s, w * 4, b)),
        Just(Op::Alloc),
        r.clone().prop_map(Op::Taint),
        (0..BUF_LEN / 4).prop_map(|w| Op::Source(w * 4)),
        r.prop_map(Op::NullCheck),
    ]
}

fn render(ops: &[Op]) -> String {
    let mut src = format!("MOVI r5, {BUF}\n");
    for op in ops {
        let line = match op {
            Op::Movi(d, i) => format!("MOVI r{d}, {i}"),
            Op::Mov(d, s) => format!("MOV r{d}, r{s}"),
            Op::Alu(o, d, s, t) => format!("{o} r{d}, r{s}, r{t}"),
            Op::Load(d, off, true) => format!("LDB r{d}, [r5+{off}]"),
            Op::Load(d, off, false) => format!("LD r{d}, [r5+{off}]"),
            Op::Store(s, off, true) => format!("STB [r5+{off}], r{s}"),
            Op::Store(s, off, false) => format!("ST [r5+{off}], r{s}"),
            Op::Alloc => "MOVI r0, 4\nSYS 1".to_string(),
            Op::Taint(r) => format!("MOV r0, r{r}\nSYS 34"),
            Op::Source(off) => format!("MOVI r0, {}\nMOVI r1, 2\nSYS 35", BUF + off),
            Op::NullCheck(r) => format!("CMPI r{r}, 0"),
        };
        src.push_str(&line);
        src.push('\n');
    }
    src.push_str("HALT\n");
    src
}

fn snapshot(shadow: &ShadowState) -> Vec<(Cell, ObjectId)> {
    let regs = Reg::all().map(|r| Cell::Reg(0, r));
    let mem = (BUF..BUF + BUF_LEN).map(Cell::Mem);
    regs.chain(mem).map(|c| (c, shadow.cell(c))).collect()
}

/// Cells an event may legitimately reassign.
fn written(event: &Event, shadow_before: &ShadowState) -> Vec<Cell> {
    let tid = event.tid;
    match event.kind {
        EventKind::RegWrite { reg, .. } => vec![Cell::Reg(tid, reg)],
        EventKind::MemWrite { addr, width, .. } => (addr..addr + width.bytes()).map(Cell::Mem).collect(),
        EventKind::MemRead { addr, width, .. } => (addr..addr + width.bytes())
            .filter(|&a| shadow_before.is_taint_source(a) || shadow_before.is_taint_source(addr))
            .map(Cell::Mem)
            .collect(),
        EventKind::Syscall { number: TAG_TAINT, .. } => vec![Cell::Reg(tid, Reg::R0)],
        _ => vec![],
    }
}

struct Invariants {
    shadow: ShadowState,
    failures: Vec<String>,
}

impl Observer for Invariants {
    fn on_step(&mut self, _: &MachineState, events: &[Event]) {
        for e in events {
            let before = snapshot(&self.shadow);
            let allowed = written(e, &self.shadow);
            let before_tags: Vec<Tags> = (0..self.shadow.object_count() as u32)
                .map(|i| self.shadow.tags(ObjectId(i)))
                .collect();
            self.shadow.on_event(e);
            let after = snapshot(&self.shadow);

            if !self.shadow.tags(ObjectId::UNTAGGED).is_empty() {
                self.failures.push(format!("untagged object gained tags at {e}"));
            }
            for ((cell, old), (_, new)) in before.iter().zip(&after) {
                if new.0 as usize >= self.shadow.object_count() {
                    self.failures.push(format!("{cell} holds dangling {new}"));
                }
                if old != new && !allowed.contains(cell) {
                    self.failures.push(format!("{cell} changed {old}->{new} at {e}"));
                }
            }
            if let EventKind::RegWrite { reg, source: WriteSource::Immediate, .. } = e.kind {
                if self.shadow.reg(e.tid, reg) != ObjectId::UNTAGGED {
                    self.failures.push(format!("MOVI kept an alias at {e}"));
                }
            }
            if let EventKind::RegWrite { reg, source: WriteSource::Register(rs), .. } = e.kind {
                if self.shadow.reg(e.tid, reg) != self.shadow.reg(e.tid, rs) {
                    self.failures.push(format!("MOV did not alias at {e}"));
                }
            }
            // Tags only ever grow on an existing object.
            for (i, old) in before_tags.iter().enumerate() {
                if !self.shadow.tags(ObjectId(i as u32)).contains(*old) {
                    self.failures.push(format!("object {i} lost tags at {e}"));
                }
            }
            // Every cell sharing a handle sees the same tags, so a check
            // through any alias is visible through all of them.
            if let EventKind::Compare { lhs, rhs_value: 0, .. } = e.kind {
                let id = self.shadow.reg(e.tid, lhs);
                if self.shadow.tags(id).intersects(Tags::NEEDS_NULL_CHECK) {
                    for (cell, h) in &after {
                        if *h == id && !self.shadow.tags(self.shadow.cell(*cell)).contains(Tags::NULL_CHECKED) {
                            self.failures.push(format!("alias {cell} missed null check at {e}"));
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn propagation_invariants(ops in prop::collection::vec(op(), 1..60)) {
        let image = assemble(&render(&ops)).unwrap();
        let mut machine = MachineState::load(&image).unwrap();
        let mut sched = SchedulerPolicy::default().build().unwrap();
        let mut obs = Invariants { shadow: ShadowState::new(), failures: Vec::new() };
        let outcome = machine::run(&mut machine, sched.as_mut(), 10_000, &mut obs);
        prop_assert!(outcome.is_clean(), "{:?}", outcome);
        prop_assert!(obs.failures.is_empty(), "{:#?}", obs.failures);
    }
}
