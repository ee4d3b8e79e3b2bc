//! Syscall and hypercall dispatch.
//!
//! Arguments are passed in `r0`–`r3`; results come back in `r0`. Hypercalls
//! (32–35) have no architectural effect and exist for the analysis layer.

use crate::isa::Reg;

use super::{Emitter, EventKind, FaultKind, Flow, MachineState, Mode, ThreadContext, WriteSource, HEAP_LIMIT};

pub const ALLOC: u32 = 1;
pub const OPEN: u32 = 2;
pub const READ_NET: u32 = 3;
pub const PRINTF: u32 = 4;
pub const READ_FD: u32 = 5;
pub const WRITE_FD: u32 = 6;
pub const KCALL: u32 = 16;
pub const KRET: u32 = 17;
pub const SET_TRAP: u32 = 18;
pub const CHECK_USER_READ: u32 = 32;
pub const CHECK_USER_WRITE: u32 = 33;
pub const TAG_TAINT: u32 = 34;
pub const TAG_UNTRUSTED_SOURCE: u32 = 35;
pub const SPAWN: u32 = 48;
pub const LOCK: u32 = 49;
pub const UNLOCK: u32 = 50;
pub const YIELD: u32 = 51;
pub const EXIT_THREAD: u32 = 52;

/// Longest string `PRINTF` consumes.
pub const PRINTF_CAP: usize = 4096;
/// Longest file name `OPEN` reads.
pub const NAME_CAP: usize = 256;
/// File names with this prefix fail to open.
pub const MISSING_PREFIX: &[u8] = b"missing";

pub fn name(number: u32) -> Option<&'static str> {
    Some(match number {
        ALLOC => "ALLOC",
        OPEN => "OPEN",
        READ_NET => "READ_NET",
        PRINTF => "PRINTF",
        READ_FD => "READ_FD",
        WRITE_FD => "WRITE_FD",
        KCALL => "KCALL",
        KRET => "KRET",
        SET_TRAP => "SET_TRAP",
        CHECK_USER_READ => "CHECK_USER_READ",
        CHECK_USER_WRITE => "CHECK_USER_WRITE",
        TAG_TAINT => "TAG_TAINT",
        TAG_UNTRUSTED_SOURCE => "TAG_UNTRUSTED_SOURCE",
        SPAWN => "SPAWN",
        LOCK => "LOCK",
        UNLOCK => "UNLOCK",
        YIELD => "YIELD",
        EXIT_THREAD => "EXIT_THREAD",
        _ => return None,
    })
}

impl MachineState {
    pub(super) fn syscall(&mut self, number: i32, out: &mut Emitter) -> Result<Flow, FaultKind> {
        let n = u32::try_from(number).ok().filter(|&n| name(n).is_some());
        let Some(n) = n else {
            return Err(FaultKind::UnknownSyscall(number));
        };
        let t = self.current_thread();
        let args = [t.reg(Reg::R0), t.reg(Reg::R1), t.reg(Reg::R2), t.reg(Reg::R3)];
        let tid = out.tid;

        // Validate before anything observable happens.
        match n {
            KCALL if self.mode() == Mode::Kernel => return Err(FaultKind::NestedKcall),
            KCALL if self.trap_entry.is_none() => return Err(FaultKind::NoTrapEntry),
            KRET if self.mode() != Mode::Kernel || t.saved_pc.is_none() => {
                return Err(FaultKind::KretOutsideKernel)
            }
            READ_NET if args[0] as u64 + args[1] as u64 > crate::MEMORY_SIZE as u64 => {
                return Err(FaultKind::Unmapped { addr: args[0] })
            }
            LOCK if self.locks.get(&args[0]) == Some(&tid) => return Err(FaultKind::Relock(args[0])),
            UNLOCK if self.locks.get(&args[0]) != Some(&tid) => {
                return Err(FaultKind::UnlockNotHeld(args[0]))
            }
            _ => {}
        }
        out.emit(EventKind::Syscall { number: n, args });

        match n {
            ALLOC => {
                let addr = self.bump_alloc(args[0]);
                self.write_reg(Reg::R0, addr, WriteSource::Syscall(n), out);
            }
            OPEN => {
                let (name, _) = self.c_string(args[0], NAME_CAP);
                let fd = if name.starts_with(MISSING_PREFIX) {
                    0
                } else {
                    let fd = self.next_fd;
                    self.next_fd += 1;
                    fd
                };
                self.write_reg(Reg::R0, fd, WriteSource::Syscall(n), out);
            }
            READ_NET => {
                let (buf, len) = (args[0] as usize, args[1] as usize);
                for (i, byte) in self.memory[buf..buf + len].iter_mut().enumerate() {
                    *byte = self.net_seed.wrapping_add(i as u8);
                }
            }
            PRINTF => {
                let (text, _) = self.c_string(args[0], PRINTF_CAP);
                let text = text.to_vec();
                self.output.extend_from_slice(&text);
            }
            READ_FD | WRITE_FD => {}
            KCALL => {
                let entry = self.trap_entry.expect("validated");
                let t = self.current_mut();
                t.saved_pc = Some(out.pc.wrapping_add(crate::isa::INSTR_SIZE));
                t.mode = Mode::Kernel;
                out.emit(EventKind::ModeChange { from: Mode::User, to: Mode::Kernel });
                return Ok(Flow::Jump(entry));
            }
            KRET => {
                let t = self.current_mut();
                let ret = t.saved_pc.take().expect("validated");
                t.mode = Mode::User;
                out.emit(EventKind::ModeChange { from: Mode::Kernel, to: Mode::User });
                return Ok(Flow::Jump(ret));
            }
            SET_TRAP => self.trap_entry = Some(args[0]),
            CHECK_USER_READ | CHECK_USER_WRITE | TAG_TAINT | TAG_UNTRUSTED_SOURCE => {}
            SPAWN => {
                let child = self.next_tid;
                self.next_tid += 1;
                self.threads.insert(child, ThreadContext::new(child, args[0], args[1]));
                out.emit(EventKind::Spawn { child, entry: args[0], stack_top: args[1] });
                self.write_reg(Reg::R0, child, WriteSource::Syscall(n), out);
            }
            LOCK => {
                let lock = args[0];
                if self.locks.contains_key(&lock) {
                    self.current_mut().blocked_on = Some(lock);
                    self.preempt = true;
                    out.emit(EventKind::Blocked { lock });
                    return Ok(Flow::Stay);
                }
                self.locks.insert(lock, tid);
                self.current_mut().locks_held.insert(lock);
                out.emit(EventKind::Lock { lock });
            }
            UNLOCK => {
                let lock = args[0];
                self.locks.remove(&lock);
                self.current_mut().locks_held.remove(&lock);
                for t in self.threads.values_mut() {
                    if t.blocked_on == Some(lock) {
                        t.blocked_on = None;
                    }
                }
                out.emit(EventKind::Unlock { lock });
            }
            YIELD => self.preempt = true,
            EXIT_THREAD => {
                self.exit_current(out);
                return Ok(Flow::Stay);
            }
            _ => unreachable!("filtered by name()"),
        }
        Ok(Flow::Next)
    }

    /// Word-aligned bump allocation; 0 when the heap is exhausted.
    fn bump_alloc(&mut self, size: u32) -> u32 {
        let size = (size as u64).max(1).next_multiple_of(4);
        let start = self.heap_next as u64;
        if start + size > HEAP_LIMIT as u64 {
            return 0;
        }
        self.heap_next = (start + size) as u32;
        start as u32
    }
}

#[cfg(test)]
mod tests {
    use super::super::sched::RoundRobin;
    use super::super::*;
    use crate::isa::assemble;

    fn boot(src: &str) -> MachineState {
        MachineState::load(&assemble(src).unwrap()).unwrap()
    }

    fn run_rr(state: &mut MachineState) -> (Outcome, Vec<Event>) {
        let mut log = EventLog::default();
        let outcome = run(state, &mut RoundRobin::new(1), 10_000, &mut log);
        (outcome, log.0)
    }

    fn fault_kind(outcome: Outcome) -> FaultKind {
        match outcome {
            Outcome::Fault(f) => f.kind,
            other => panic!("expected a fault, got {other:?}"),
        }
    }

    #[test]
    fn alloc_returns_disjoint_blocks_then_zero() {
        let src = "\
            MOVI r0, 16\nSYS 1\nMOV r1, r0\n\
            MOVI r0, 16\nSYS 1\nMOV r2, r0\n\
            MOVI r0, 0x10000\nSYS 1\nHALT\n";
        let mut state = boot(src);
        run_rr(&mut state);
        let t = state.current_thread();
        let (a, b) = (t.reg(Reg::R1), t.reg(Reg::R2));
        assert!(a != 0 && b != 0);
        assert!(a + 16 <= b, "{a:#x} {b:#x}");
        assert_eq!(a % 16, 0);
        assert!(a >= state.image_range().end);
        assert_eq!(t.reg(Reg::R0), 0);
    }

    #[test]
    fn open_fails_for_missing_names() {
        let src = "\
            MOVI r0, good\nSYS 2\nMOV r1, r0\n\
            MOVI r0, bad\nSYS 2\nMOV r2, r0\n\
            MOVI r0, good\nSYS 2\nHALT\n\
            good: .asciiz \"config\"\n\
            bad: .asciiz \"missing.cfg\"\n";
        let mut state = boot(src);
        run_rr(&mut state);
        let t = state.current_thread();
        assert_eq!(t.reg(Reg::R1), FIRST_FD);
        assert_eq!(t.reg(Reg::R2), 0);
        assert_eq!(t.reg(Reg::R0), FIRST_FD + 1);
    }

    #[test]
    fn read_net_fills_pattern_and_printf_consumes() {
        let src = "\
            MOVI r0, buf\nMOVI r1, 4\nSYS 3\n\
            SYS 4\nHALT\n\
            buf: .word 0\n.word 0\n";
        let mut state = boot(src);
        run_rr(&mut state);
        let buf = state.image_range().end - 8;
        assert_eq!(&state.memory()[buf as usize..buf as usize + 5], b"ABCD\0");
        assert_eq!(state.output, b"ABCD");
    }

    #[test]
    fn kcall_traps_and_kret_returns() {
        let src = "\
            start: MOVI r0, kernel\nSYS 18\nMOVI r0, 0x2000\nSYS 16\nMOVI r5, 1\nHALT\n\
            kernel: CLI\nSTI\nSYS 17\n";
        let mut state = boot(src);
        let (outcome, events) = run_rr(&mut state);
        assert_eq!(outcome, Outcome::Halted);
        let modes: Vec<_> = events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::ModeChange { from, to } => Some((from, to)),
                _ => None,
            })
            .collect();
        assert_eq!(modes, [(Mode::User, Mode::Kernel), (Mode::Kernel, Mode::User)]);
        assert_eq!(state.current_thread().reg(Reg::R5), 1);
        assert_eq!(state.mode(), Mode::User);
    }

    #[test]
    fn syscall_faults() {
        assert_eq!(fault_kind(run_rr(&mut boot("SYS 16\nHALT")).0), FaultKind::NoTrapEntry);
        assert_eq!(fault_kind(run_rr(&mut boot("SYS 17\nHALT")).0), FaultKind::KretOutsideKernel);
        assert_eq!(fault_kind(run_rr(&mut boot("SYS 99\nHALT")).0), FaultKind::UnknownSyscall(99));
        assert_eq!(fault_kind(run_rr(&mut boot("SYS -1\nHALT")).0), FaultKind::UnknownSyscall(-1));
        assert_eq!(
            fault_kind(run_rr(&mut boot("MOVI r0, 1\nSYS 50\nHALT")).0),
            FaultKind::UnlockNotHeld(1)
        );
        assert_eq!(
            fault_kind(run_rr(&mut boot("MOVI r0, 1\nSYS 49\nSYS 49\nHALT")).0),
            FaultKind::Relock(1)
        );
        assert_eq!(
            fault_kind(run_rr(&mut boot("MOVI r0, 0xfff0\nMOVI r1, 0x20\nSYS 3\nHALT")).0),
            FaultKind::Unmapped { addr: 0xfff0 }
        );
    }

    #[test]
    fn contended_lock_blocks_until_released() {
        // Thread 0 takes lock 7, spawns thread 1 which contends for it.
        let src = "\
            start: MOVI r0, 7\nSYS 49\n\
            MOVI r0, worker\nMOVI r1, 0xdff0\nSYS 48\n\
            SYS 51\nSYS 51\n\
            MOVI r0, 7\nSYS 50\nSYS 52\n\
            worker: MOVI r0, 7\nSYS 49\nMOVI r2, 1\nSYS 50\nSYS 52\n";
        let mut state = boot(src);
        let (outcome, events) = run_rr(&mut state);
        assert_eq!(outcome, Outcome::AllExited);
        let lock_events: Vec<_> = events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Lock { .. } => Some((e.tid, "lock")),
                EventKind::Blocked { .. } => Some((e.tid, "blocked")),
                EventKind::Unlock { .. } => Some((e.tid, "unlock")),
                _ => None,
            })
            .collect();
        assert_eq!(lock_events[0], (0, "lock"));
        assert_eq!(lock_events[1], (1, "blocked"));
        let unlock0 = lock_events.iter().position(|&e| e == (0, "unlock")).unwrap();
        let lock1 = lock_events.iter().position(|&e| e == (1, "lock")).unwrap();
        assert!(unlock0 < lock1);
        assert_eq!(state.thread(1).unwrap().reg(Reg::R2), 1);
        assert!(state.locks.is_empty());
    }

    #[test]
    fn all_blocked_is_a_deadlock() {
        let src = "\
            start: MOVI r0, 1\nSYS 49\n\
            MOVI r0, worker\nMOVI r1, 0xdff0\nSYS 48\n\
            MOVI r0, 2\nSYS 49\nHALT\n\
            worker: MOVI r0, 2\nSYS 49\nMOVI r0, 1\nSYS 49\nHALT\n";
        let mut state = boot(src);
        assert_eq!(fault_kind(run_rr(&mut state).0), FaultKind::Deadlock);
    }

    #[test]
    fn spawn_creates_thread_with_stack() {
        let src = "start: MOVI r0, w\nMOVI r1, 0xdff0\nSYS 48\nSYS 52\nw: SYS 52\n";
        let mut state = boot(src);
        let (outcome, events) = run_rr(&mut state);
        assert_eq!(outcome, Outcome::AllExited);
        let child = state.thread(1).unwrap();
        assert_eq!(child.stack_top, 0xdff0);
        assert_eq!(child.reg(Reg::SP), 0xdff0);
        assert_eq!(child.stack_base, 0xdff0 - STACK_SIZE);
        assert_eq!(state.thread(0).unwrap().reg(Reg::R0), 1);
        assert!(events.iter().any(|e| matches!(e.kind, EventKind::Spawn { child: 1, .. })));
    }
}
