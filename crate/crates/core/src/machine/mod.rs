//! The guest interpreter.
//!
//! Guest threads are simulated on the calling thread. Every executed
//! instruction produces a batch of [`Event`]s which [`run`] hands to an
//! [`Observer`] before the next instruction is scheduled.

mod event;
pub mod sched;
pub mod syscall;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::isa::{DecodeError, Instruction, ProgramImage, Reg, Width, INSTR_SIZE, NUM_REGS};
use crate::MEMORY_SIZE;

pub use event::{CompareRhs, Event, EventKind, MemAccess, WriteSource};
pub use sched::{PolicyError, Scheduler, SchedulerPolicy};

pub type Tid = u32;
pub type LockId = u32;

/// Initial stack pointer of thread 0.
pub const STACK_TOP: u32 = 0xfff0;
/// Extent of each thread's stack region below its initial stack pointer.
pub const STACK_SIZE: u32 = 0x1000;
/// The bump heap runs from the end of the image (16-byte aligned) up to here.
pub const HEAP_LIMIT: u32 = 0xc000;
/// First descriptor handed out by `OPEN`.
pub const FIRST_FD: u32 = 3;
/// Default first byte of the `READ_NET` pattern (`'A'`).
pub const DEFAULT_NET_SEED: u8 = b'A';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    User,
    Kernel,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::User => "user",
            Mode::Kernel => "kernel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadContext {
    pub tid: Tid,
    pub regs: [u32; NUM_REGS],
    pub pc: u32,
    pub zflag: bool,
    pub locks_held: BTreeSet<LockId>,
    pub alive: bool,
    pub stack_base: u32,
    pub stack_top: u32,
    /// Privilege mode; saved and restored with the thread like a flags register.
    pub mode: Mode,
    /// Interrupts enabled.
    pub iflag: bool,
    /// Return address saved by `KCALL`.
    pub saved_pc: Option<u32>,
    pub blocked_on: Option<LockId>,
}

impl ThreadContext {
    fn new(tid: Tid, entry: u32, stack_top: u32) -> Self {
        let mut regs = [0; NUM_REGS];
        regs[Reg::SP.index()] = stack_top;
        ThreadContext {
            tid,
            regs,
            pc: entry,
            zflag: false,
            locks_held: BTreeSet::new(),
            alive: true,
            stack_base: stack_top.saturating_sub(STACK_SIZE),
            stack_top,
            mode: Mode::User,
            iflag: true,
            saved_pc: None,
            blocked_on: None,
        }
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn runnable(&self) -> bool {
        self.alive && self.blocked_on.is_none()
    }

    /// Whether `addr` lies in this thread's stack region `[base, top]`.
    pub fn stack_contains(&self, addr: u32) -> bool {
        (self.stack_base..=self.stack_top).contains(&addr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultKind {
    #[error("unaligned {width}-byte access at {addr:#x}")]
    Unaligned { addr: u32, width: u32 },
    #[error("unmapped access at {addr:#x}")]
    Unmapped { addr: u32 },
    #[error("bad fetch address {0:#x}")]
    BadFetch(u32),
    #[error("decode: {0}")]
    Decode(DecodeError),
    #[error("privileged instruction in user mode")]
    Privileged,
    #[error("unknown syscall {0}")]
    UnknownSyscall(i32),
    #[error("KCALL with no trap entry set")]
    NoTrapEntry,
    #[error("KCALL while already in kernel mode")]
    NestedKcall,
    #[error("KRET outside a kernel call")]
    KretOutsideKernel,
    #[error("lock {0} already held by this thread")]
    Relock(LockId),
    #[error("unlock of lock {0} not held by this thread")]
    UnlockNotHeld(LockId),
    #[error("deadlock: every live thread is blocked")]
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    pub tid: Tid,
    pub pc: u32,
    pub step: u64,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (thread {}, pc {:#x}, step {})", self.kind, self.tid, self.pc, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaltReason {
    /// Thread 0 executed `HALT`.
    Halt,
    AllExited,
    Fault(Fault),
}

/// How a [`run`] ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Halted,
    AllExited,
    Fault(Fault),
    Timeout,
}

impl Outcome {
    /// Normal termination: `HALT` or every thread exited.
    pub fn is_clean(&self) -> bool {
        matches!(self, Outcome::Halted | Outcome::AllExited)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Halted => f.write_str("halted"),
            Outcome::AllExited => f.write_str("all threads exited"),
            Outcome::Fault(fault) => write!(f, "fault: {fault}"),
            Outcome::Timeout => f.write_str("step limit reached"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot load image: {0}")]
pub struct LoadError(#[from] pub crate::isa::ImageError);

/// Complete architectural state of the guest.
#[derive(Clone, PartialEq, Eq)]
pub struct MachineState {
    memory: Box<[u8]>,
    pub threads: BTreeMap<Tid, ThreadContext>,
    pub current: Tid,
    pub trap_entry: Option<u32>,
    /// Lock id to holder.
    pub locks: BTreeMap<LockId, Tid>,
    pub halted: Option<HaltReason>,
    pub step_count: u64,
    /// Bytes consumed by `PRINTF`.
    pub output: Vec<u8>,
    origin: u32,
    image_end: u32,
    heap_next: u32,
    next_fd: u32,
    next_tid: Tid,
    net_seed: u8,
    /// Set when the current thread gave up the CPU (yield, block, exit).
    preempt: bool,
}

impl fmt::Debug for MachineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MachineState")
            .field("threads", &self.threads)
            .field("current", &self.current)
            .field("trap_entry", &self.trap_entry)
            .field("locks", &self.locks)
            .field("halted", &self.halted)
            .field("step_count", &self.step_count)
            .finish_non_exhaustive()
    }
}

impl MachineState {
    pub fn load(image: &ProgramImage) -> Result<Self, LoadError> {
        Self::load_with_net_seed(image, DEFAULT_NET_SEED)
    }

    pub fn load_with_net_seed(image: &ProgramImage, net_seed: u8) -> Result<Self, LoadError> {
        image.validate()?;
        let mut memory = vec![0u8; MEMORY_SIZE].into_boxed_slice();
        let start = image.origin as usize;
        memory[start..start + image.payload.len()].copy_from_slice(&image.payload);
        let mut threads = BTreeMap::new();
        threads.insert(0, ThreadContext::new(0, image.entry, STACK_TOP));
        Ok(MachineState {
            memory,
            threads,
            current: 0,
            trap_entry: None,
            locks: BTreeMap::new(),
            halted: None,
            step_count: 0,
            output: Vec::new(),
            origin: image.origin,
            image_end: image.end(),
            heap_next: image.end().next_multiple_of(16),
            next_fd: FIRST_FD,
            next_tid: 1,
            net_seed,
            preempt: false,
        })
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn image_range(&self) -> std::ops::Range<u32> {
        self.origin..self.image_end
    }

    pub fn thread(&self, tid: Tid) -> Option<&ThreadContext> {
        self.threads.get(&tid)
    }

    pub fn current_thread(&self) -> &ThreadContext {
        &self.threads[&self.current]
    }

    fn current_mut(&mut self) -> &mut ThreadContext {
        self.threads.get_mut(&self.current).expect("current thread exists")
    }

    /// Privilege mode of the current thread.
    pub fn mode(&self) -> Mode {
        self.current_thread().mode
    }

    /// Interrupt flag of the current thread.
    pub fn iflag(&self) -> bool {
        self.current_thread().iflag
    }

    /// SHA-256 over memory, every thread context, lock ownership and output.
    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(&self.memory);
        h.update(format!("{:?}", self).as_bytes());
        h.update(&self.output);
        hex::encode(h.finalize())
    }

    pub fn is_halted(&self) -> bool {
        self.halted.is_some()
    }

    /// Whether the current thread asked to be switched out.
    pub fn preempt_requested(&self) -> bool {
        self.preempt
    }

    pub fn runnable_tids(&self) -> Vec<Tid> {
        self.threads.values().filter(|t| t.runnable()).map(|t| t.tid).collect()
    }

    pub fn switch_to(&mut self, tid: Tid) {
        debug_assert!(self.threads.get(&tid).is_some_and(ThreadContext::runnable));
        self.current = tid;
        self.preempt = false;
    }

    pub fn read_u8(&self, addr: u32) -> Option<u8> {
        self.memory.get(addr as usize).copied()
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        let at = addr as usize;
        let bytes = self.memory.get(at..at.checked_add(4)?)?;
        Some(u32::from_le_bytes(bytes.try_into().unwrap()))
    }

    /// NUL-terminated string at `addr`, without the NUL, at most `cap` bytes.
    /// The flag reports whether a NUL was found.
    pub fn c_string(&self, addr: u32, cap: usize) -> (&[u8], bool) {
        let start = (addr as usize).min(MEMORY_SIZE);
        let end = start.saturating_add(cap).min(MEMORY_SIZE);
        let window = &self.memory[start..end];
        match window.iter().position(|&b| b == 0) {
            Some(n) => (&window[..n], true),
            None => (window, false),
        }
    }

    fn record_fault(&mut self, kind: FaultKind, tid: Tid, pc: u32, step: u64) {
        self.halted = Some(HaltReason::Fault(Fault { kind, tid, pc, step }));
    }

    /// Every live thread is blocked on a lock.
    pub fn record_deadlock(&mut self) {
        let (tid, pc) = (self.current, self.current_thread().pc);
        self.record_fault(FaultKind::Deadlock, tid, pc, self.step_count);
    }

    /// Fetch, decode and execute one instruction of the current thread.
    ///
    /// A faulting instruction leaves architectural state untouched apart
    /// from the recorded fault and the step counter.
    pub fn step(&mut self) -> Vec<Event> {
        assert!(!self.is_halted(), "step on a halted machine");
        let tid = self.current;
        let pc = self.current_thread().pc;
        let step = self.step_count;
        self.step_count += 1;
        let mut out = Emitter { step, tid, pc, events: Vec::new() };

        let result = self.fetch(pc).and_then(|instr| {
            out.emit(EventKind::Fetch { instr });
            self.execute(instr, &mut out)
        });
        match result {
            Ok(Flow::Next) => self.current_mut().pc = pc.wrapping_add(INSTR_SIZE),
            Ok(Flow::Jump(target)) => self.current_mut().pc = target,
            Ok(Flow::Stay) => {}
            Err(kind) => {
                out.emit(EventKind::Fault { kind: kind.clone() });
                self.record_fault(kind, tid, pc, step);
            }
        }
        out.events
    }

    fn fetch(&self, pc: u32) -> Result<Instruction, FaultKind> {
        if !pc.wrapping_sub(self.origin).is_multiple_of(INSTR_SIZE) {
            return Err(FaultKind::BadFetch(pc));
        }
        let at = pc as usize;
        let bytes = self
            .memory
            .get(at..at + INSTR_SIZE as usize)
            .ok_or(FaultKind::BadFetch(pc))?;
        Instruction::decode(bytes).map_err(FaultKind::Decode)
    }

    fn check_access(addr: u32, width: Width) -> Result<usize, FaultKind> {
        let n = width.bytes();
        if width == Width::Word && !addr.is_multiple_of(4) {
            return Err(FaultKind::Unaligned { addr, width: n });
        }
        if addr as usize + n as usize > MEMORY_SIZE {
            return Err(FaultKind::Unmapped { addr });
        }
        Ok(addr as usize)
    }

    fn read_reg(&self, reg: Reg, out: &mut Emitter) -> u32 {
        let value = self.current_thread().reg(reg);
        out.emit(EventKind::RegRead { reg, value });
        value
    }

    fn write_reg(&mut self, reg: Reg, value: u32, source: WriteSource, out: &mut Emitter) {
        self.current_mut().regs[reg.index()] = value;
        out.emit(EventKind::RegWrite { reg, value, source });
    }

    fn execute(&mut self, instr: Instruction, out: &mut Emitter) -> Result<Flow, FaultKind> {
        match instr {
            Instruction::Movi { rd, imm } => {
                self.write_reg(rd, imm as u32, WriteSource::Immediate, out);
            }
            Instruction::Mov { rd, rs } => {
                let value = self.read_reg(rs, out);
                self.write_reg(rd, value, WriteSource::Register(rs), out);
            }
            Instruction::Load { width, rd, base, offset } => {
                let addr = self.read_reg(base, out).wrapping_add(offset as u32);
                let at = Self::check_access(addr, width)?;
                let value = match width {
                    Width::Byte => self.memory[at] as u32,
                    Width::Word => u32::from_le_bytes(self.memory[at..at + 4].try_into().unwrap()),
                };
                out.emit(EventKind::MemRead { addr, width, base, value });
                self.write_reg(rd, value, WriteSource::Memory { addr, width }, out);
            }
            Instruction::Store { width, base, offset, src } => {
                let addr = self.read_reg(base, out).wrapping_add(offset as u32);
                let value = self.read_reg(src, out);
                let at = Self::check_access(addr, width)?;
                match width {
                    Width::Byte => self.memory[at] = value as u8,
                    Width::Word => self.memory[at..at + 4].copy_from_slice(&value.to_le_bytes()),
                }
                let value = if width == Width::Byte { value & 0xff } else { value };
                out.emit(EventKind::MemWrite { addr, width, base, src, value });
            }
            Instruction::Alu { op, rd, rs, rt } => {
                let lhs = self.read_reg(rs, out);
                let rhs = self.read_reg(rt, out);
                let result = op.apply(lhs, rhs);
                out.emit(EventKind::Binop { op, rd, rs, rt, lhs, rhs, result });
                self.write_reg(rd, result, WriteSource::Alu { op, rs, rt }, out);
            }
            Instruction::Cmp { rs, rt } => {
                let lhs_value = self.read_reg(rs, out);
                let rhs_value = self.read_reg(rt, out);
                self.compare(rs, CompareRhs::Reg(rt), lhs_value, rhs_value, out);
            }
            Instruction::Cmpi { rs, imm } => {
                let lhs_value = self.read_reg(rs, out);
                self.compare(rs, CompareRhs::Imm(imm), lhs_value, imm as u32, out);
            }
            Instruction::Beq { target } | Instruction::Bne { target } => {
                let zflag = self.current_thread().zflag;
                let taken = zflag == matches!(instr, Instruction::Beq { .. });
                let target = target as u32;
                out.emit(EventKind::Branch { target, taken });
                if taken {
                    return Ok(Flow::Jump(target));
                }
            }
            Instruction::Jmp { target } => {
                out.emit(EventKind::Branch { target: target as u32, taken: true });
                return Ok(Flow::Jump(target as u32));
            }
            Instruction::Call { target } => {
                let link = out.pc.wrapping_add(INSTR_SIZE);
                self.write_reg(Reg::LR, link, WriteSource::Link, out);
                out.emit(EventKind::Branch { target: target as u32, taken: true });
                return Ok(Flow::Jump(target as u32));
            }
            Instruction::Ret => {
                let target = self.read_reg(Reg::LR, out);
                out.emit(EventKind::Branch { target, taken: true });
                return Ok(Flow::Jump(target));
            }
            Instruction::Sys { number } => return self.syscall(number, out),
            Instruction::Cli | Instruction::Sti => {
                if self.mode() != Mode::Kernel {
                    return Err(FaultKind::Privileged);
                }
                let enabled = instr == Instruction::Sti;
                self.current_mut().iflag = enabled;
                out.emit(EventKind::IflagChange { enabled });
            }
            Instruction::Halt => {
                if out.tid == 0 {
                    self.halted = Some(HaltReason::Halt);
                    return Ok(Flow::Stay);
                }
                self.exit_current(out);
                return Ok(Flow::Stay);
            }
        }
        Ok(Flow::Next)
    }

    fn compare(&mut self, lhs: Reg, rhs: CompareRhs, lhs_value: u32, rhs_value: u32, out: &mut Emitter) {
        let equal = lhs_value == rhs_value;
        self.current_mut().zflag = equal;
        out.emit(EventKind::Compare { lhs, rhs, lhs_value, rhs_value, equal });
    }

    fn exit_current(&mut self, out: &mut Emitter) {
        self.current_mut().alive = false;
        self.preempt = true;
        out.emit(EventKind::ThreadExit);
        if self.threads.values().all(|t| !t.alive) {
            self.halted = Some(HaltReason::AllExited);
        }
    }
}

enum Flow {
    Next,
    Jump(u32),
    /// The pc does not advance: blocked, halted or exited.
    Stay,
}

struct Emitter {
    step: u64,
    tid: Tid,
    pc: u32,
    events: Vec<Event>,
}

impl Emitter {
    fn emit(&mut self, kind: EventKind) {
        self.events.push(Event { step: self.step, tid: self.tid, pc: self.pc, kind });
    }
}

/// Receives each step's events synchronously.
pub trait Observer {
    fn on_step(&mut self, machine: &MachineState, events: &[Event]);
}

impl Observer for () {
    fn on_step(&mut self, _: &MachineState, _: &[Event]) {}
}

/// Collects the full event stream.
#[derive(Debug, Default)]
pub struct EventLog(pub Vec<Event>);

impl Observer for EventLog {
    fn on_step(&mut self, _: &MachineState, events: &[Event]) {
        self.0.extend_from_slice(events);
    }
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn on_step(&mut self, machine: &MachineState, events: &[Event]) {
        self.0.on_step(machine, events);
        self.1.on_step(machine, events);
    }
}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn on_step(&mut self, machine: &MachineState, events: &[Event]) {
        (**self).on_step(machine, events);
    }
}

/// Schedule and step until the machine halts or `step_limit` steps have run.
pub fn run(
    state: &mut MachineState,
    scheduler: &mut dyn Scheduler,
    step_limit: u64,
    observer: &mut dyn Observer,
) -> Outcome {
    loop {
        match &state.halted {
            Some(HaltReason::Halt) => return Outcome::Halted,
            Some(HaltReason::AllExited) => return Outcome::AllExited,
            Some(HaltReason::Fault(fault)) => return Outcome::Fault(fault.clone()),
            None => {}
        }
        if state.step_count >= step_limit {
            return Outcome::Timeout;
        }
        match scheduler.select(state) {
            Some(tid) => state.switch_to(tid),
            None => {
                state.record_deadlock();
                continue;
            }
        }
        let events = state.step();
        observer.on_step(state, &events);
    }
}
