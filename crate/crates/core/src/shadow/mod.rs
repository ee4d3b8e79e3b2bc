//! Shadow machine state.
//!
//! Every register (per guest thread) and every memory byte has a shadow
//! cell. A cell does not hold tags directly; it holds a handle to a
//! [`TypeObject`] in an arena. Copying a value copies the handle, so a check
//! performed through one copy is visible through every other copy.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use bitflags::bitflags;

use crate::isa::{AluOp, Reg, NUM_REGS};
use crate::machine::syscall::{
    ALLOC, CHECK_USER_READ, CHECK_USER_WRITE, KCALL, OPEN, READ_NET, TAG_TAINT,
    TAG_UNTRUSTED_SOURCE,
};
use crate::machine::{Event, EventKind, Tid, WriteSource};
use crate::MEMORY_SIZE;

bitflags! {
    /// Type tags carried by a [`TypeObject`].
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Tags: u8 {
        const USER_UNCHECKED = 1 << 0;
        const USER_READ_CHECKED = 1 << 1;
        const USER_WRITE_CHECKED = 1 << 2;
        const ALLOC_UNCHECKED = 1 << 3;
        const NULL_CHECKED = 1 << 4;
        const TAINTED = 1 << 5;
        const FD_UNCHECKED = 1 << 6;
    }
}

impl Tags {
    /// Tags that make a value subject to the null-check rule.
    pub const NEEDS_NULL_CHECK: Tags = Tags::ALLOC_UNCHECKED.union(Tags::FD_UNCHECKED);

    /// Whether `self` is a consistent tag set: checked tags only appear next
    /// to the unchecked tag they refine.
    pub fn is_consistent(self) -> bool {
        let user_checks = Tags::USER_READ_CHECKED | Tags::USER_WRITE_CHECKED;
        (!self.intersects(user_checks) || self.contains(Tags::USER_UNCHECKED))
            && (!self.contains(Tags::NULL_CHECKED) || self.intersects(Tags::NEEDS_NULL_CHECK))
    }
}

impl fmt::Display for Tags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (name, _)) in self.iter_names().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(name)?;
        }
        f.write_str("}")
    }
}

/// Handle to a [`TypeObject`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u32);

impl ObjectId {
    /// The shared object with the permanently empty tag set.
    pub const UNTAGGED: ObjectId = ObjectId(0);
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where an object was created.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Origin {
    pub pc: u32,
    pub tid: Tid,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeObject {
    pub id: ObjectId,
    pub tags: Tags,
    pub origin: Option<Origin>,
    pub note: String,
}

/// A shadow cell name, for the shadow trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cell {
    Reg(Tid, Reg),
    Mem(u32),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Reg(tid, reg) => write!(f, "t{tid}.{reg}"),
            Cell::Mem(addr) => write!(f, "{addr:#06x}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShadowState {
    objects: Vec<TypeObject>,
    regs: BTreeMap<Tid, [ObjectId; NUM_REGS]>,
    mem: Box<[ObjectId]>,
    taint_sources: Vec<Range<u32>>,
    touched: Vec<Cell>,
}

impl Default for ShadowState {
    fn default() -> Self {
        Self::new()
    }
}

impl ShadowState {
    pub fn new() -> Self {
        let untagged = TypeObject {
            id: ObjectId::UNTAGGED,
            tags: Tags::empty(),
            origin: None,
            note: "untagged".to_string(),
        };
        ShadowState {
            objects: vec![untagged],
            regs: BTreeMap::new(),
            mem: vec![ObjectId::UNTAGGED; MEMORY_SIZE].into_boxed_slice(),
            taint_sources: Vec::new(),
            touched: Vec::new(),
        }
    }

    pub fn reg(&self, tid: Tid, reg: Reg) -> ObjectId {
        self.regs.get(&tid).map_or(ObjectId::UNTAGGED, |cells| cells[reg.index()])
    }

    pub fn mem(&self, addr: u32) -> ObjectId {
        self.mem.get(addr as usize).copied().unwrap_or(ObjectId::UNTAGGED)
    }

    pub fn cell(&self, cell: Cell) -> ObjectId {
        match cell {
            Cell::Reg(tid, reg) => self.reg(tid, reg),
            Cell::Mem(addr) => self.mem(addr),
        }
    }

    pub fn object(&self, id: ObjectId) -> &TypeObject {
        &self.objects[id.0 as usize]
    }

    pub fn tags(&self, id: ObjectId) -> Tags {
        self.object(id).tags
    }

    pub fn reg_tags(&self, tid: Tid, reg: Reg) -> Tags {
        self.tags(self.reg(tid, reg))
    }

    /// Number of objects ever created, the untagged one included.
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn taint_sources(&self) -> &[Range<u32>] {
        &self.taint_sources
    }

    pub fn is_taint_source(&self, addr: u32) -> bool {
        self.taint_sources.iter().any(|r| r.contains(&addr))
    }

    /// Create an object with `tags`.
    pub fn fresh(&mut self, tags: Tags, origin: Origin, note: String) -> ObjectId {
        let id = ObjectId(self.objects.len() as u32);
        self.objects.push(TypeObject { id, tags, origin: Some(origin), note });
        id
    }

    /// Add `tag` to the object, honouring the tag-set constraints. Returns
    /// whether the object changed. The untagged object is never modified.
    pub fn add_tag(&mut self, id: ObjectId, tag: Tags) -> bool {
        if id == ObjectId::UNTAGGED {
            return false;
        }
        let obj = &mut self.objects[id.0 as usize];
        let next = obj.tags | tag;
        if next == obj.tags || !next.is_consistent() {
            return false;
        }
        obj.tags = next;
        true
    }

    fn set_reg(&mut self, tid: Tid, reg: Reg, id: ObjectId) {
        self.regs.entry(tid).or_insert([ObjectId::UNTAGGED; NUM_REGS])[reg.index()] = id;
        self.touched.push(Cell::Reg(tid, reg));
    }

    fn set_mem(&mut self, addr: u32, len: u32, id: ObjectId) {
        for a in addr..addr + len {
            if let Some(cell) = self.mem.get_mut(a as usize) {
                *cell = id;
                self.touched.push(Cell::Mem(a));
            }
        }
    }

    /// Cells assigned or mutated since the last call.
    pub fn take_touched(&mut self) -> Vec<Cell> {
        let mut cells = std::mem::take(&mut self.touched);
        cells.sort();
        cells.dedup();
        cells
    }

    /// Shadow-trace lines for `cells`: `cell <name> -> object <id> tags {..}`.
    pub fn describe(&self, cells: &[Cell]) -> Vec<String> {
        cells
            .iter()
            .map(|&cell| {
                let id = self.cell(cell);
                format!("cell {cell} -> object {id} tags {}", self.tags(id))
            })
            .collect()
    }

    /// Apply the propagation rule for one machine event.
    pub fn on_event(&mut self, event: &Event) {
        let tid = event.tid;
        let origin = Origin { pc: event.pc, tid, step: event.step };
        match event.kind {
            EventKind::RegWrite { reg, source, .. } => {
                let id = match source {
                    WriteSource::Immediate | WriteSource::Link => ObjectId::UNTAGGED,
                    WriteSource::Register(rs) => self.reg(tid, rs),
                    // Word loads take the lowest-addressed byte's object.
                    WriteSource::Memory { addr, .. } => self.mem(addr),
                    WriteSource::Alu { op, rs, rt } => self.binop(op, tid, rs, rt, origin),
                    WriteSource::Syscall(ALLOC) => self.fresh(
                        Tags::ALLOC_UNCHECKED,
                        origin,
                        format!("ALLOC at step {} pc {:#x}", origin.step, origin.pc),
                    ),
                    WriteSource::Syscall(OPEN) => self.fresh(
                        Tags::FD_UNCHECKED,
                        origin,
                        format!("OPEN at step {} pc {:#x}", origin.step, origin.pc),
                    ),
                    WriteSource::Syscall(_) => ObjectId::UNTAGGED,
                };
                self.set_reg(tid, reg, id);
            }
            EventKind::MemWrite { addr, width, src, .. } => {
                let id = self.reg(tid, src);
                self.set_mem(addr, width.bytes(), id);
            }
            EventKind::MemRead { addr, width, .. } => {
                if (addr..addr + width.bytes()).any(|a| self.is_taint_source(a)) {
                    let id = self.fresh(
                        Tags::TAINTED,
                        origin,
                        format!("read from untrusted source {addr:#x} at step {}", origin.step),
                    );
                    self.set_mem(addr, width.bytes(), id);
                }
            }
            EventKind::Compare { lhs, rhs_value: 0, .. } => {
                let id = self.reg(tid, lhs);
                if self.tags(id).intersects(Tags::NEEDS_NULL_CHECK) && self.add_tag(id, Tags::NULL_CHECKED) {
                    self.touched.push(Cell::Reg(tid, lhs));
                }
            }
            EventKind::Syscall { number, args } => self.on_syscall(number, args, origin),
            EventKind::Spawn { child, .. } => {
                self.regs.insert(child, [ObjectId::UNTAGGED; NUM_REGS]);
            }
            _ => {}
        }
    }

    fn binop(&mut self, op: AluOp, tid: Tid, rs: Reg, rt: Reg, origin: Origin) -> ObjectId {
        if rs == rt && matches!(op, AluOp::Xor | AluOp::Sub) {
            return ObjectId::UNTAGGED;
        }
        let (a, b) = (self.reg(tid, rs), self.reg(tid, rt));
        match (self.tags(a).is_empty(), self.tags(b).is_empty()) {
            (true, true) => ObjectId::UNTAGGED,
            (false, true) => a,
            (true, false) => b,
            (false, false) if a == b => a,
            (false, false) => {
                let tags = self.tags(a) | self.tags(b);
                let note = format!("{op:?} of objects {a} and {b} at step {}", origin.step);
                self.fresh(tags, origin, note)
            }
        }
    }

    fn on_syscall(&mut self, number: u32, args: [u32; 4], origin: Origin) {
        let tid = origin.tid;
        match number {
            KCALL => {
                for (i, reg) in [Reg::R0, Reg::R1, Reg::R2, Reg::R3].into_iter().enumerate() {
                    let note = format!("syscall argument r{i} at step {} pc {:#x}", origin.step, origin.pc);
                    let id = self.fresh(Tags::USER_UNCHECKED, origin, note);
                    self.set_reg(tid, reg, id);
                }
            }
            CHECK_USER_READ | CHECK_USER_WRITE => {
                let (tag, what) = if number == CHECK_USER_READ {
                    (Tags::USER_READ_CHECKED, "read")
                } else {
                    (Tags::USER_WRITE_CHECKED, "write")
                };
                let id = self.reg(tid, Reg::R0);
                if self.tags(id).contains(Tags::USER_UNCHECKED) && self.add_tag(id, tag) {
                    let note = format!("; {what}-checked len {} at step {}", args[1], origin.step);
                    self.objects[id.0 as usize].note.push_str(&note);
                    self.touched.push(Cell::Reg(tid, Reg::R0));
                }
            }
            TAG_TAINT => {
                let id = self.reg(tid, Reg::R0);
                if id == ObjectId::UNTAGGED {
                    let note = format!("TAG_TAINT at step {}", origin.step);
                    let fresh = self.fresh(Tags::TAINTED, origin, note);
                    self.set_reg(tid, Reg::R0, fresh);
                } else if self.add_tag(id, Tags::TAINTED) {
                    self.touched.push(Cell::Reg(tid, Reg::R0));
                }
            }
            TAG_UNTRUSTED_SOURCE => {
                let end = (args[0] as u64 + args[1] as u64).min(MEMORY_SIZE as u64) as u32;
                if args[0] < end {
                    self.taint_sources.push(args[0]..end);
                }
            }
            READ_NET => {
                let (buf, len) = (args[0], args[1]);
                if len > 0 {
                    let note = format!("READ_NET into {buf:#x}+{len} at step {}", origin.step);
                    let id = self.fresh(Tags::TAINTED, origin, note);
                    self.set_mem(buf, len, id);
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests;
