use std::fmt;

use crate::isa::{AluOp, Instruction, Reg, Width};

use super::{FaultKind, LockId, Mode, Tid};

/// One observable micro-step of guest execution.
///
/// Events of a single instruction share `step`, `tid` and `pc` and appear
/// in operand evaluation order, starting with [`EventKind::Fetch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: u64,
    pub tid: Tid,
    pub pc: u32,
    pub kind: EventKind,
}

/// Where a register's new value came from. The shadow layer keys its
/// propagation rule off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteSource {
    Immediate,
    Register(Reg),
    Memory { addr: u32, width: Width },
    Alu { op: AluOp, rs: Reg, rt: Reg },
    /// Return address written by `CALL`.
    Link,
    /// Return value of the given syscall.
    Syscall(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareRhs {
    Reg(Reg),
    Imm(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Fetch { instr: Instruction },
    RegRead { reg: Reg, value: u32 },
    RegWrite { reg: Reg, value: u32, source: WriteSource },
    MemRead { addr: u32, width: Width, base: Reg, value: u32 },
    MemWrite { addr: u32, width: Width, base: Reg, src: Reg, value: u32 },
    Binop { op: AluOp, rd: Reg, rs: Reg, rt: Reg, lhs: u32, rhs: u32, result: u32 },
    Compare { lhs: Reg, rhs: CompareRhs, lhs_value: u32, rhs_value: u32, equal: bool },
    Branch { target: u32, taken: bool },
    Syscall { number: u32, args: [u32; 4] },
    Lock { lock: LockId },
    Unlock { lock: LockId },
    /// A `LOCK` found the lock held; the thread waits and will retry.
    Blocked { lock: LockId },
    Spawn { child: Tid, entry: u32, stack_top: u32 },
    ThreadExit,
    ModeChange { from: Mode, to: Mode },
    IflagChange { enabled: bool },
    Fault { kind: FaultKind },
}

/// A guest data access, as seen by checkers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemAccess {
    pub addr: u32,
    pub width: Width,
    /// Register holding the base address.
    pub base: Reg,
    pub is_write: bool,
}

impl EventKind {
    pub fn access(&self) -> Option<MemAccess> {
        match *self {
            EventKind::MemRead { addr, width, base, .. } => {
                Some(MemAccess { addr, width, base, is_write: false })
            }
            EventKind::MemWrite { addr, width, base, .. } => {
                Some(MemAccess { addr, width, base, is_write: true })
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Fetch { .. } => "fetch",
            EventKind::RegRead { .. } => "reg-read",
            EventKind::RegWrite { .. } => "reg-write",
            EventKind::MemRead { .. } => "mem-read",
            EventKind::MemWrite { .. } => "mem-write",
            EventKind::Binop { .. } => "binop",
            EventKind::Compare { .. } => "compare",
            EventKind::Branch { .. } => "branch",
            EventKind::Syscall { .. } => "syscall",
            EventKind::Lock { .. } => "lock",
            EventKind::Unlock { .. } => "unlock",
            EventKind::Blocked { .. } => "blocked",
            EventKind::Spawn { .. } => "spawn",
            EventKind::ThreadExit => "thread-exit",
            EventKind::ModeChange { .. } => "mode-change",
            EventKind::IflagChange { .. } => "iflag-change",
            EventKind::Fault { .. } => "fault",
        }
    }
}

impl fmt::Display for WriteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WriteSource::Immediate => f.write_str("imm"),
            WriteSource::Register(r) => write!(f, "{r}"),
            WriteSource::Memory { addr, width } => write!(f, "mem[{addr:#x}]/{}", width.bytes()),
            WriteSource::Alu { op, rs, rt } => write!(f, "{op:?}({rs},{rt})"),
            WriteSource::Link => f.write_str("link"),
            WriteSource::Syscall(n) => write!(f, "sys{n}"),
        }
    }
}

/// Operands as they appear in the trace's last column.
struct Operands<'a>(&'a EventKind);

impl fmt::Display for Operands<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            EventKind::Fetch { instr } => write!(f, "{instr}"),
            EventKind::RegRead { reg, value } => write!(f, "{reg}={value:#x}"),
            EventKind::RegWrite { reg, value, source } => write!(f, "{reg}={value:#x} src={source}"),
            EventKind::MemRead { addr, width, base, value } => {
                write!(f, "[{addr:#x}]/{} via {base} = {value:#x}", width.bytes())
            }
            EventKind::MemWrite { addr, width, base, src, value } => {
                write!(f, "[{addr:#x}]/{} via {base} := {src}={value:#x}", width.bytes())
            }
            EventKind::Binop { op, rd, rs, rt, lhs, rhs, result } => {
                write!(f, "{op:?} {rd} := {rs}={lhs:#x}, {rt}={rhs:#x} -> {result:#x}")
            }
            EventKind::Compare { lhs, rhs, lhs_value, rhs_value, equal } => {
                let rhs = match rhs {
                    CompareRhs::Reg(r) => r.to_string(),
                    CompareRhs::Imm(i) => format!("#{i}"),
                };
                write!(f, "{lhs}={lhs_value:#x} {rhs}={rhs_value:#x} eq={equal}")
            }
            EventKind::Branch { target, taken } => write!(f, "{target:#x} taken={taken}"),
            EventKind::Syscall { number, args } => write!(
                f,
                "{number} args={:#x},{:#x},{:#x},{:#x}",
                args[0], args[1], args[2], args[3]
            ),
            EventKind::Lock { lock } | EventKind::Unlock { lock } | EventKind::Blocked { lock } => {
                write!(f, "lock={lock}")
            }
            EventKind::Spawn { child, entry, stack_top } => {
                write!(f, "child={child} entry={entry:#x} stack={stack_top:#x}")
            }
            EventKind::ThreadExit => Ok(()),
            EventKind::ModeChange { from, to } => write!(f, "{from}->{to}"),
            EventKind::IflagChange { enabled } => write!(f, "enabled={enabled}"),
            EventKind::Fault { kind } => write!(f, "{kind}"),
        }
    }
}

/// Tab-separated trace line: step, tid, pc, kind, operands.
impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:#06x}\t{}\t{}",
            self.step,
            self.tid,
            self.pc,
            self.kind.name(),
            Operands(&self.kind)
        )
    }
}
