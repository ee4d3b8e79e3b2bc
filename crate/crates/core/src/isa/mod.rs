//! The guest instruction set: eight 32-bit registers, fixed 8-byte encodings.
//!
//! Encoding layout (little-endian immediate):
//!
//! ```text
//! byte 0      opcode
//! byte 1      rd (high nibble) | rs (low nibble)
//! byte 2      rt
//! byte 3      reserved, must be zero
//! bytes 4..8  imm (i32, little-endian)
//! ```
//!
//! Fields an opcode does not use must be zero, so each instruction has
//! exactly one encoding.

pub mod asm;
pub mod image;

use std::fmt;

use thiserror::Error;

pub use asm::{assemble, AsmError, AsmErrorKind};
pub use image::{ImageError, ProgramImage};

/// Size of one encoded instruction in bytes.
pub const INSTR_SIZE: u32 = 8;

/// Number of general purpose registers.
pub const NUM_REGS: usize = 8;

/// A general purpose register index, always in `0..=7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    /// Stack register by convention.
    pub const SP: Reg = Reg(6);
    /// Link register, written by `CALL` and read by `RET`.
    pub const LR: Reg = Reg(7);

    pub fn new(index: u8) -> Option<Reg> {
        (index < NUM_REGS as u8).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Memory access width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Width {
    Byte,
    Word,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::Byte => 1,
            Width::Word => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
}

impl AluOp {
    pub const ALL: [AluOp; 6] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
    ];

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
        }
    }

    pub fn opcode(self) -> Opcode {
        match self {
            AluOp::Add => Opcode::Add,
            AluOp::Sub => Opcode::Sub,
            AluOp::Mul => Opcode::Mul,
            AluOp::And => Opcode::And,
            AluOp::Or => Opcode::Or,
            AluOp::Xor => Opcode::Xor,
        }
    }
}

macro_rules! opcodes {
    ($($name:ident = $byte:literal, $mnemonic:literal;)*) => {
        /// Opcode byte values.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        #[repr(u8)]
        pub enum Opcode {
            $($name = $byte,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name,)*];

            pub fn from_byte(byte: u8) -> Option<Opcode> {
                match byte {
                    $($byte => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mnemonic,)*
                }
            }

            pub fn from_mnemonic(text: &str) -> Option<Opcode> {
                let upper = text.to_ascii_uppercase();
                match upper.as_str() {
                    $($mnemonic => Some(Opcode::$name),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    Movi = 0x01, "MOVI";
    Mov = 0x02, "MOV";
    Ld = 0x03, "LD";
    Ldb = 0x04, "LDB";
    St = 0x05, "ST";
    Stb = 0x06, "STB";
    Add = 0x10, "ADD";
    Sub = 0x11, "SUB";
    Mul = 0x12, "MUL";
    And = 0x13, "AND";
    Or = 0x14, "OR";
    Xor = 0x15, "XOR";
    Cmp = 0x18, "CMP";
    Cmpi = 0x19, "CMPI";
    Beq = 0x20, "BEQ";
    Bne = 0x21, "BNE";
    Jmp = 0x22, "JMP";
    Call = 0x23, "CALL";
    Ret = 0x24, "RET";
    Sys = 0x30, "SYS";
    Cli = 0x31, "CLI";
    Sti = 0x32, "STI";
    Halt = 0x3f, "HALT";
}

/// A decoded guest instruction.
///
/// Branch and call targets are absolute guest addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Movi { rd: Reg, imm: i32 },
    Mov { rd: Reg, rs: Reg },
    Load { width: Width, rd: Reg, base: Reg, offset: i32 },
    Store { width: Width, base: Reg, offset: i32, src: Reg },
    Alu { op: AluOp, rd: Reg, rs: Reg, rt: Reg },
    Cmp { rs: Reg, rt: Reg },
    Cmpi { rs: Reg, imm: i32 },
    Beq { target: i32 },
    Bne { target: i32 },
    Jmp { target: i32 },
    Call { target: i32 },
    Ret,
    Sys { number: i32 },
    Cli,
    Sti,
    Halt,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match *self {
            Instruction::Movi { .. } => Opcode::Movi,
            Instruction::Mov { .. } => Opcode::Mov,
            Instruction::Load { width: Width::Word, .. } => Opcode::Ld,
            Instruction::Load { width: Width::Byte, .. } => Opcode::Ldb,
            Instruction::Store { width: Width::Word, .. } => Opcode::St,
            Instruction::Store { width: Width::Byte, .. } => Opcode::Stb,
            Instruction::Alu { op, .. } => op.opcode(),
            Instruction::Cmp { .. } => Opcode::Cmp,
            Instruction::Cmpi { .. } => Opcode::Cmpi,
            Instruction::Beq { .. } => Opcode::Beq,
            Instruction::Bne { .. } => Opcode::Bne,
            Instruction::Jmp { .. } => Opcode::Jmp,
            Instruction::Call { .. } => Opcode::Call,
            Instruction::Ret => Opcode::Ret,
            Instruction::Sys { .. } => Opcode::Sys,
            Instruction::Cli => Opcode::Cli,
            Instruction::Sti => Opcode::Sti,
            Instruction::Halt => Opcode::Halt,
        }
    }

    /// Memory access width, for loads and stores only.
    pub fn width(&self) -> Option<Width> {
        match *self {
            Instruction::Load { width, .. } | Instruction::Store { width, .. } => Some(width),
            _ => None,
        }
    }

    pub fn encode(&self) -> [u8; 8] {
        let z = Reg(0);
        let (rd, rs, rt, imm) = match *self {
            Instruction::Movi { rd, imm } => (rd, z, z, imm),
            Instruction::Mov { rd, rs } => (rd, rs, z, 0),
            Instruction::Load { rd, base, offset, .. } => (rd, base, z, offset),
            Instruction::Store { base, offset, src, .. } => (z, base, src, offset),
            Instruction::Alu { rd, rs, rt, .. } => (rd, rs, rt, 0),
            Instruction::Cmp { rs, rt } => (z, rs, rt, 0),
            Instruction::Cmpi { rs, imm } => (z, rs, z, imm),
            Instruction::Beq { target }
            | Instruction::Bne { target }
            | Instruction::Jmp { target }
            | Instruction::Call { target } => (z, z, z, target),
            Instruction::Sys { number } => (z, z, z, number),
            Instruction::Ret | Instruction::Cli | Instruction::Sti | Instruction::Halt => {
                (z, z, z, 0)
            }
        };
        let mut out = [0u8; 8];
        out[0] = self.opcode() as u8;
        out[1] = (rd.0 << 4) | rs.0;
        out[2] = rt.0;
        out[4..8].copy_from_slice(&imm.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Instruction, DecodeError> {
        let bytes: &[u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or(DecodeError::Truncated(bytes.len()))?;
        let opcode = Opcode::from_byte(bytes[0]).ok_or(DecodeError::UnknownOpcode(bytes[0]))?;
        let reg = |field: u8| Reg::new(field).ok_or(DecodeError::BadRegister(field));
        let rd = reg(bytes[1] >> 4)?;
        let rs = reg(bytes[1] & 0x0f)?;
        let rt = reg(bytes[2])?;
        let imm = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if bytes[3] != 0 {
            return Err(DecodeError::NonCanonical(opcode));
        }

        let instr = match opcode {
            Opcode::Movi => Instruction::Movi { rd, imm },
            Opcode::Mov => Instruction::Mov { rd, rs },
            Opcode::Ld | Opcode::Ldb => Instruction::Load {
                width: if opcode == Opcode::Ld { Width::Word } else { Width::Byte },
                rd,
                base: rs,
                offset: imm,
            },
            Opcode::St | Opcode::Stb => Instruction::Store {
                width: if opcode == Opcode::St { Width::Word } else { Width::Byte },
                base: rs,
                offset: imm,
                src: rt,
            },
            Opcode::Add => Instruction::Alu { op: AluOp::Add, rd, rs, rt },
            Opcode::Sub => Instruction::Alu { op: AluOp::Sub, rd, rs, rt },
            Opcode::Mul => Instruction::Alu { op: AluOp::Mul, rd, rs, rt },
            Opcode::And => Instruction::Alu { op: AluOp::And, rd, rs, rt },
            Opcode::Or => Instruction::Alu { op: AluOp::Or, rd, rs, rt },
            Opcode::Xor => Instruction::Alu { op: AluOp::Xor, rd, rs, rt },
            Opcode::Cmp => Instruction::Cmp { rs, rt },
            Opcode::Cmpi => Instruction::Cmpi { rs, imm },
            Opcode::Beq => Instruction::Beq { target: imm },
            Opcode::Bne => Instruction::Bne { target: imm },
            Opcode::Jmp => Instruction::Jmp { target: imm },
            Opcode::Call => Instruction::Call { target: imm },
            Opcode::Ret => Instruction::Ret,
            Opcode::Sys => Instruction::Sys { number: imm },
            Opcode::Cli => Instruction::Cli,
            Opcode::Sti => Instruction::Sti,
            Opcode::Halt => Instruction::Halt,
        };
        // Unused fields must be zero; re-encoding catches every stray bit.
        if instr.encode() != *bytes {
            return Err(DecodeError::NonCanonical(opcode));
        }
        Ok(instr)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.opcode().mnemonic();
        match *self {
            Instruction::Movi { rd, imm } => write!(f, "{m} {rd}, {imm}"),
            Instruction::Mov { rd, rs } => write!(f, "{m} {rd}, {rs}"),
            Instruction::Load { rd, base, offset, .. } => write!(f, "{m} {rd}, [{base}{offset:+}]"),
            Instruction::Store { base, offset, src, .. } => {
                write!(f, "{m} [{base}{offset:+}], {src}")
            }
            Instruction::Alu { rd, rs, rt, .. } => write!(f, "{m} {rd}, {rs}, {rt}"),
            Instruction::Cmp { rs, rt } => write!(f, "{m} {rs}, {rt}"),
            Instruction::Cmpi { rs, imm } => write!(f, "{m} {rs}, {imm}"),
            Instruction::Beq { target }
            | Instruction::Bne { target }
            | Instruction::Jmp { target }
            | Instruction::Call { target } if target >= 0 => write!(f, "{m} {target:#x}"),
            Instruction::Beq { target }
            | Instruction::Bne { target }
            | Instruction::Jmp { target }
            | Instruction::Call { target } => write!(f, "{m} {target}"),
            Instruction::Sys { number } => write!(f, "{m} {number}"),
            Instruction::Ret | Instruction::Cli | Instruction::Sti | Instruction::Halt => {
                f.write_str(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode byte {0:#04x}")]
    UnknownOpcode(u8),
    #[error("register field {0} out of range")]
    BadRegister(u8),
    #[error("non-canonical encoding for {}", .0.mnemonic())]
    NonCanonical(Opcode),
    #[error("truncated instruction ({0} bytes)")]
    Truncated(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn halt_encodes_to_opcode_then_zeros() {
        let bytes = Instruction::Halt.encode();
        assert_eq!(bytes, [Opcode::Halt as u8, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn immediates_are_little_endian_twos_complement() {
        let movi = Instruction::Movi { rd: Reg::R1, imm: 5 }.encode();
        assert_eq!(&movi[4..], &[0x05, 0, 0, 0]);
        let cmpi = Instruction::Cmpi { rs: Reg::R3, imm: -1 }.encode();
        assert_eq!(&cmpi[4..], &[0xff, 0xff, 0xff, 0xff]);
        assert_eq!(cmpi[1], 0x03);
    }

    #[test]
    fn mov_round_trips() {
        let mov = Instruction::Mov { rd: Reg::R2, rs: Reg::R1 };
        assert_eq!(Instruction::decode(&mov.encode()), Ok(mov));
    }

    #[test]
    fn decode_rejects_reserved_and_bad_fields() {
        assert_eq!(
            Instruction::decode(&[0xff, 0, 0, 0, 0, 0, 0, 0]),
            Err(DecodeError::UnknownOpcode(0xff))
        );
        assert_eq!(
            Instruction::decode(&[0x00; 8]),
            Err(DecodeError::UnknownOpcode(0))
        );
        assert_eq!(
            Instruction::decode(&[Opcode::Add as u8, 0x18, 0, 0, 0, 0, 0, 0]),
            Err(DecodeError::BadRegister(8))
        );
        assert_eq!(
            Instruction::decode(&[Opcode::Halt as u8, 0, 0, 0, 1, 0, 0, 0]),
            Err(DecodeError::NonCanonical(Opcode::Halt))
        );
        assert_eq!(
            Instruction::decode(&[Opcode::Halt as u8, 0, 0, 7, 0, 0, 0, 0]),
            Err(DecodeError::NonCanonical(Opcode::Halt))
        );
        assert_eq!(Instruction::decode(&[1, 2]), Err(DecodeError::Truncated(2)));
    }

    #[test]
    fn opcode_bytes_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for op in Opcode::ALL {
            assert!(seen.insert(*op as u8));
            assert_eq!(Opcode::from_byte(*op as u8), Some(*op));
            assert_eq!(Opcode::from_mnemonic(op.mnemonic()), Some(*op));
        }
    }

    pub(crate) fn arb_reg() -> impl Strategy<Value = Reg> {
        (0u8..8).prop_map(Reg)
    }

    pub(crate) fn arb_instruction() -> impl Strategy<Value = Instruction> {
        let width = prop_oneof![Just(Width::Byte), Just(Width::Word)];
        let alu = proptest::sample::select(AluOp::ALL.to_vec());
        prop_oneof![
            (arb_reg(), any::<i32>()).prop_map(|(rd, imm)| Instruction::Movi { rd, imm }),
            (arb_reg(), arb_reg()).prop_map(|(rd, rs)| Instruction::Mov { rd, rs }),
            (width.clone(), arb_reg(), arb_reg(), any::<i32>()).prop_map(
                |(width, rd, base, offset)| Instruction::Load { width, rd, base, offset }
            ),
            (width, arb_reg(), any::<i32>(), arb_reg()).prop_map(
                |(width, base, offset, src)| Instruction::Store { width, base, offset, src }
            ),
            (alu, arb_reg(), arb_reg(), arb_reg())
                .prop_map(|(op, rd, rs, rt)| Instruction::Alu { op, rd, rs, rt }),
            (arb_reg(), arb_reg()).prop_map(|(rs, rt)| Instruction::Cmp { rs, rt }),
            (arb_reg(), any::<i32>()).prop_map(|(rs, imm)| Instruction::Cmpi { rs, imm }),
            any::<i32>().prop_map(|target| Instruction::Beq { target }),
            any::<i32>().prop_map(|target| Instruction::Bne { target }),
            any::<i32>().prop_map(|target| Instruction::Jmp { target }),
            any::<i32>().prop_map(|target| Instruction::Call { target }),
            any::<i32>().prop_map(|number| Instruction::Sys { number }),
            Just(Instruction::Ret),
            Just(Instruction::Cli),
            Just(Instruction::Sti),
            Just(Instruction::Halt),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn decode_inverts_encode(instr in arb_instruction()) {
            prop_assert_eq!(Instruction::decode(&instr.encode()), Ok(instr));
        }
    }

    proptest! {
        #[test]
        fn decode_accepts_only_canonical_bytes(bytes in any::<[u8; 8]>()) {
            if let Ok(instr) = Instruction::decode(&bytes) {
                prop_assert_eq!(instr.encode(), bytes);
            }
        }
    }
}
