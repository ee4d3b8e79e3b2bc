//! Two-pass assembler from text to [`ProgramImage`].
//!
//! One statement per line. `;` starts a comment, `name:` defines a label.
//! Directives are `.org N`, `.word N` and `.asciiz "text"`. Immediates are
//! decimal, `0x` hex, `'c'` characters or label names. Instructions are
//! padded to 8-byte boundaries relative to the origin. The entry point is
//! the `start` label when defined, otherwise the origin.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{AluOp, Instruction, Opcode, ProgramImage, Reg, Width, INSTR_SIZE};
use crate::MEMORY_SIZE;

/// Origin used when the source has no leading `.org`.
pub const DEFAULT_ORIGIN: u32 = 0x1000;

/// Label that designates the entry point.
pub const ENTRY_LABEL: &str = "start";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("immediate {0} out of signed 32-bit range")]
    ImmediateRange(i128),
    #[error("malformed operand `{0}`")]
    MalformedOperand(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unknown directive `{0}`")]
    UnknownDirective(String),
    #[error("{mnemonic} expects {expected} operand(s), found {found}")]
    OperandCount { mnemonic: String, expected: usize, found: usize },
    #[error("bad string literal: {0}")]
    BadString(String),
    #[error(".org {target:#x} is below the current location {current:#x}")]
    OrgBackwards { target: u32, current: u32 },
    #[error("program does not fit in guest memory")]
    Overflow,
    #[error("program is empty")]
    Empty,
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

#[derive(Debug, Clone, PartialEq)]
enum Imm {
    Value(i32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Operand {
    Reg(Reg),
    Imm(Imm),
    Mem { base: Reg, offset: Imm },
}

#[derive(Debug)]
enum ItemKind {
    Instr { opcode: Opcode, operands: Vec<Operand> },
    Word(Imm),
    Bytes(Vec<u8>),
}

#[derive(Debug)]
struct Item {
    line: usize,
    addr: u32,
    kind: ItemKind,
}

/// Assemble `source` into a program image.
pub fn assemble(source: &str) -> Result<ProgramImage, AsmError> {
    let mut origin: Option<u32> = None;
    let mut lc: u32 = 0;
    let mut items = Vec::new();
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut pending: Vec<(String, usize)> = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let mut rest = strip_comment(raw).trim();

        while let Some((label, tail)) = split_label(rest) {
            if !is_identifier(label) || Reg::parse(label).is_some() {
                return Err(err(line, AsmErrorKind::MalformedOperand(label.to_string())));
            }
            if symbols.contains_key(label) || pending.iter().any(|(l, _)| l == label) {
                return Err(err(line, AsmErrorKind::DuplicateLabel(label.to_string())));
            }
            pending.push((label.to_string(), line));
            rest = tail.trim();
        }
        if rest.is_empty() {
            continue;
        }

        let (head, args) = match rest.find(char::is_whitespace) {
            Some(pos) => (&rest[..pos], rest[pos..].trim()),
            None => (rest, ""),
        };

        if let Some(directive) = head.strip_prefix('.') {
            match directive.to_ascii_lowercase().as_str() {
                "org" => {
                    let target = parse_number(args)
                        .ok_or_else(|| err(line, AsmErrorKind::MalformedOperand(args.into())))?;
                    let target = u32::try_from(target)
                        .ok()
                        .filter(|&t| (t as usize) <= MEMORY_SIZE)
                        .ok_or_else(|| err(line, AsmErrorKind::Overflow))?;
                    match origin {
                        None => {
                            origin = Some(target);
                            lc = target;
                        }
                        Some(_) if target < lc => {
                            return Err(err(line, AsmErrorKind::OrgBackwards { target, current: lc }))
                        }
                        // Gaps are zero-filled when the payload is laid out.
                        Some(_) => lc = target,
                    }
                }
                "word" => {
                    let imm = parse_imm(args).map_err(|k| err(line, k))?;
                    let addr = place(&mut origin, &mut lc, 1);
                    bind(&mut pending, &mut symbols, addr);
                    items.push(Item { line, addr, kind: ItemKind::Word(imm) });
                    lc = advance(lc, 4, line)?;
                }
                "asciiz" => {
                    let mut bytes = parse_string(args).map_err(|k| err(line, k))?;
                    bytes.push(0);
                    let addr = place(&mut origin, &mut lc, 1);
                    bind(&mut pending, &mut symbols, addr);
                    lc = advance(lc, bytes.len() as u32, line)?;
                    items.push(Item { line, addr, kind: ItemKind::Bytes(bytes) });
                }
                _ => return Err(err(line, AsmErrorKind::UnknownDirective(head.to_string()))),
            }
            continue;
        }

        let opcode = Opcode::from_mnemonic(head)
            .ok_or_else(|| err(line, AsmErrorKind::UnknownMnemonic(head.to_string())))?;
        let operands = split_operands(args)
            .into_iter()
            .map(|text| parse_operand(text).map_err(|k| err(line, k)))
            .collect::<Result<Vec<_>, _>>()?;
        let addr = place(&mut origin, &mut lc, INSTR_SIZE);
        bind(&mut pending, &mut symbols, addr);
        items.push(Item { line, addr, kind: ItemKind::Instr { opcode, operands } });
        lc = advance(lc, INSTR_SIZE, line)?;
    }

    let origin = origin.ok_or_else(|| err(last_line.max(1), AsmErrorKind::Empty))?;
    bind(&mut pending, &mut symbols, lc);

    // Pass two: resolve labels and emit bytes.
    let mut payload = vec![0u8; (lc - origin) as usize];
    for item in &items {
        let at = (item.addr - origin) as usize;
        match &item.kind {
            ItemKind::Bytes(bytes) => payload[at..at + bytes.len()].copy_from_slice(bytes),
            ItemKind::Word(imm) => {
                let value = resolve(imm, &symbols, item.line)?;
                payload[at..at + 4].copy_from_slice(&value.to_le_bytes());
            }
            ItemKind::Instr { opcode, operands } => {
                let instr = build(*opcode, operands, &symbols, item.line)?;
                payload[at..at + 8].copy_from_slice(&instr.encode());
            }
        }
    }

    let entry = symbols.get(ENTRY_LABEL).copied().unwrap_or(origin);
    ProgramImage::new(origin, payload, entry, symbols)
        .map_err(|_| err(last_line.max(1), AsmErrorKind::Empty))
}

/// Fix the origin on first emission and align the location counter.
fn place(origin: &mut Option<u32>, lc: &mut u32, align: u32) -> u32 {
    let base = *origin.get_or_insert_with(|| {
        *lc = DEFAULT_ORIGIN;
        DEFAULT_ORIGIN
    });
    let rem = (*lc - base) % align;
    if rem != 0 {
        *lc += align - rem;
    }
    *lc
}

fn advance(lc: u32, by: u32, line: usize) -> Result<u32, AsmError> {
    let next = lc as usize + by as usize;
    if next > MEMORY_SIZE {
        return Err(err(line, AsmErrorKind::Overflow));
    }
    Ok(next as u32)
}

fn bind(pending: &mut Vec<(String, usize)>, symbols: &mut BTreeMap<String, u32>, addr: u32) {
    for (label, _) in pending.drain(..) {
        symbols.insert(label, addr);
    }
}

fn resolve(imm: &Imm, symbols: &BTreeMap<String, u32>, line: usize) -> Result<i32, AsmError> {
    match imm {
        Imm::Value(v) => Ok(*v),
        Imm::Label(name) => symbols
            .get(name)
            .map(|&a| a as i32)
            .ok_or_else(|| err(line, AsmErrorKind::UndefinedLabel(name.clone()))),
    }
}

fn build(
    opcode: Opcode,
    operands: &[Operand],
    symbols: &BTreeMap<String, u32>,
    line: usize,
) -> Result<Instruction, AsmError> {
    let expected = match opcode {
        Opcode::Ret | Opcode::Cli | Opcode::Sti | Opcode::Halt => 0,
        Opcode::Beq | Opcode::Bne | Opcode::Jmp | Opcode::Call | Opcode::Sys => 1,
        Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::And | Opcode::Or | Opcode::Xor => 3,
        _ => 2,
    };
    if operands.len() != expected {
        return Err(err(
            line,
            AsmErrorKind::OperandCount {
                mnemonic: opcode.mnemonic().to_string(),
                expected,
                found: operands.len(),
            },
        ));
    }
    let malformed = |op: &Operand| err(line, AsmErrorKind::MalformedOperand(format!("{op:?}")));
    let reg = |i: usize| match &operands[i] {
        Operand::Reg(r) => Ok(*r),
        other => Err(malformed(other)),
    };
    let imm = |i: usize| match &operands[i] {
        Operand::Imm(imm) => resolve(imm, symbols, line),
        other => Err(malformed(other)),
    };
    let mem = |i: usize| match &operands[i] {
        Operand::Mem { base, offset } => Ok((*base, resolve(offset, symbols, line)?)),
        other => Err(malformed(other)),
    };
    let alu = |op: AluOp| -> Result<Instruction, AsmError> {
        Ok(Instruction::Alu { op, rd: reg(0)?, rs: reg(1)?, rt: reg(2)? })
    };

    Ok(match opcode {
        Opcode::Movi => Instruction::Movi { rd: reg(0)?, imm: imm(1)? },
        Opcode::Mov => Instruction::Mov { rd: reg(0)?, rs: reg(1)? },
        Opcode::Ld | Opcode::Ldb => {
            let (base, offset) = mem(1)?;
            let width = if opcode == Opcode::Ld { Width::Word } else { Width::Byte };
            Instruction::Load { width, rd: reg(0)?, base, offset }
        }
        Opcode::St | Opcode::Stb => {
            let (base, offset) = mem(0)?;
            let width = if opcode == Opcode::St { Width::Word } else { Width::Byte };
            Instruction::Store { width, base, offset, src: reg(1)? }
        }
        Opcode::Add => alu(AluOp::Add)?,
        Opcode::Sub => alu(AluOp::Sub)?,
        Opcode::Mul => alu(AluOp::Mul)?,
        Opcode::And => alu(AluOp::And)?,
        Opcode::Or => alu(AluOp::Or)?,
        Opcode::Xor => alu(AluOp::Xor)?,
        Opcode::Cmp => Instruction::Cmp { rs: reg(0)?, rt: reg(1)? },
        Opcode::Cmpi => Instruction::Cmpi { rs: reg(0)?, imm: imm(1)? },
        Opcode::Beq => Instruction::Beq { target: imm(0)? },
        Opcode::Bne => Instruction::Bne { target: imm(0)? },
        Opcode::Jmp => Instruction::Jmp { target: imm(0)? },
        Opcode::Call => Instruction::Call { target: imm(0)? },
        Opcode::Sys => Instruction::Sys { number: imm(0)? },
        Opcode::Ret => Instruction::Ret,
        Opcode::Cli => Instruction::Cli,
        Opcode::Sti => Instruction::Sti,
        Opcode::Halt => Instruction::Halt,
    })
}

impl Reg {
    /// Parse `r0`..`r7`, `sp` or `lr`.
    pub fn parse(text: &str) -> Option<Reg> {
        let lower = text.to_ascii_lowercase();
        match lower.as_str() {
            "sp" => Some(Reg::SP),
            "lr" => Some(Reg::LR),
            _ => {
                let digits = lower.strip_prefix('r')?;
                if digits.len() != 1 {
                    return None;
                }
                Reg::new(digits.parse().ok()?)
            }
        }
    }
}

/// Cut a trailing `;` comment, ignoring semicolons inside literals.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                ';' => return &line[..i],
                '"' | '\'' => quote = Some(c),
                _ => {}
            },
        }
    }
    line
}

fn split_label(text: &str) -> Option<(&str, &str)> {
    let pos = text.find(':')?;
    let label = text[..pos].trim();
    if label.is_empty() || label.contains(|c: char| c.is_whitespace() || c == '"' || c == '\'') {
        return None;
    }
    Some((label, &text[pos + 1..]))
}

fn is_identifier(text: &str) -> bool {
    let mut chars = text.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn split_operands(args: &str) -> Vec<&str> {
    if args.trim().is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in args.char_indices() {
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                '\'' | '"' => quote = Some(c),
                ',' => {
                    out.push(args[start..i].trim());
                    start = i + 1;
                }
                _ => {}
            },
        }
    }
    out.push(args[start..].trim());
    out
}

fn parse_operand(text: &str) -> Result<Operand, AsmErrorKind> {
    let malformed = || AsmErrorKind::MalformedOperand(text.to_string());
    if let Some(inner) = text.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or_else(malformed)?.trim();
        let (base, offset) = match inner.find(['+', '-']) {
            Some(pos) => {
                let sign = &inner[pos..pos + 1];
                let tail = inner[pos + 1..].trim();
                let offset = match parse_imm(tail)? {
                    Imm::Value(v) if sign == "-" => {
                        let neg = -(v as i128);
                        Imm::Value(i32::try_from(neg).map_err(|_| AsmErrorKind::ImmediateRange(neg))?)
                    }
                    Imm::Label(_) if sign == "-" => return Err(malformed()),
                    imm => imm,
                };
                (inner[..pos].trim(), offset)
            }
            None => (inner, Imm::Value(0)),
        };
        let base = Reg::parse(base).ok_or_else(malformed)?;
        return Ok(Operand::Mem { base, offset });
    }
    if let Some(r) = Reg::parse(text) {
        return Ok(Operand::Reg(r));
    }
    parse_imm(text).map(Operand::Imm)
}

fn parse_imm(text: &str) -> Result<Imm, AsmErrorKind> {
    let text = text.trim();
    if is_identifier(text) && Reg::parse(text).is_none() {
        return Ok(Imm::Label(text.to_string()));
    }
    if let Some(body) = text.strip_prefix('\'') {
        let body = body
            .strip_suffix('\'')
            .ok_or_else(|| AsmErrorKind::MalformedOperand(text.to_string()))?;
        let bytes = unescape(body)?;
        return match bytes.as_slice() {
            [b] => Ok(Imm::Value(*b as i32)),
            _ => Err(AsmErrorKind::MalformedOperand(text.to_string())),
        };
    }
    let value = parse_number(text).ok_or_else(|| AsmErrorKind::MalformedOperand(text.to_string()))?;
    i32::try_from(value)
        .map(Imm::Value)
        .map_err(|_| AsmErrorKind::ImmediateRange(value))
}

fn parse_number(text: &str) -> Option<i128> {
    let text = text.trim();
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let magnitude = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i128::from_str_radix(hex, 16).ok()?,
        None if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) => body.parse().ok()?,
        None => return None,
    };
    Some(if negative { -magnitude } else { magnitude })
}

fn parse_string(text: &str) -> Result<Vec<u8>, AsmErrorKind> {
    let body = text
        .trim()
        .strip_prefix('"')
        .and_then(|t| t.strip_suffix('"'))
        .ok_or_else(|| AsmErrorKind::BadString(text.to_string()))?;
    unescape(body)
}

fn unescape(body: &str) -> Result<Vec<u8>, AsmErrorKind> {
    let mut out = Vec::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        let byte = match chars.next() {
            Some('n') => b'\n',
            Some('t') => b'\t',
            Some('r') => b'\r',
            Some('0') => 0,
            Some('\\') => b'\\',
            Some('"') => b'"',
            Some('\'') => b'\'',
            other => return Err(AsmErrorKind::BadString(format!("unknown escape {other:?}"))),
        };
        out.push(byte);
    }
    Ok(out)
}
