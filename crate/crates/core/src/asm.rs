//! Text assembly: `.core N` sections, one instruction per line.
//!
//! ```text
//! .core 0
//! sldi  $r2, 0x100          # comment
//! vvadd $r1, $r2, $r3, 16, [0b011:8]
//! ```
//!
//! Registers are `$r0`..`$r31`. Immediates are decimal, `0x` hex or `0b`
//! binary, optionally negative. The offset operand `[select:value]` takes the
//! select mask in binary and may be omitted, which means `[0b000:0]`.

use std::fmt;

use crate::isa::{self, CopyOperands, Instruction, Limits, Offset, Opcode, Reg, UnaryOperands, VecOperands};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub core_id: u32,
    pub instructions: Vec<Instruction>,
    /// 1-based source line of each instruction; empty for programs built in code.
    pub source_lines: Vec<usize>,
}

impl Section {
    pub fn new(core_id: u32, instructions: Vec<Instruction>) -> Section {
        Section { core_id, instructions, source_lines: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SourceProgram {
    pub sections: Vec<Section>,
}

impl SourceProgram {
    /// Compares core ids and instructions, ignoring source line numbers.
    pub fn same_code(&self, other: &SourceProgram) -> bool {
        self.sections.len() == other.sections.len()
            && self
                .sections
                .iter()
                .zip(&other.sections)
                .all(|(a, b)| a.core_id == b.core_id && a.instructions == b.instructions)
    }

    pub fn section(&self, core_id: u32) -> Option<&Section> {
        self.sections.iter().find(|s| s.core_id == core_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmDiagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub severity: Severity,
}

impl fmt::Display for AsmDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {}: {}", self.line, self.column, sev, self.message)
    }
}

/// A parse failure inside one line, before it is attached to a line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub column: usize,
    pub message: String,
}

impl LineError {
    fn new(column: usize, message: impl Into<String>) -> LineError {
        LineError { column, message: message.into() }
    }
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

pub fn assemble(text: &str) -> Result<SourceProgram, Vec<AsmDiagnostic>> {
    assemble_with(text, &Limits::default())
}

pub fn assemble_with(text: &str, limits: &Limits) -> Result<SourceProgram, Vec<AsmDiagnostic>> {
    let normalized = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut program = SourceProgram::default();
    let mut diagnostics = Vec::new();
    let error = |line: usize, column: usize, message: String| AsmDiagnostic {
        line,
        column,
        message,
        severity: Severity::Error,
    };

    for (idx, raw) in normalized.split('\n').enumerate() {
        let line_no = idx + 1;
        let code = raw.split('#').next().unwrap_or("");
        let trimmed = code.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = code.len() - code.trim_start().len();
        if let Some(directive) = trimmed.strip_prefix('.') {
            let mut words = directive.split_whitespace();
            match (words.next(), words.next(), words.next()) {
                (Some("core"), Some(id), None) => match parse_int(id) {
                    Some(v) if (0..=i64::from(u16::MAX)).contains(&v) => {
                        let core_id = v as u32;
                        if program.sections.iter().any(|s| s.core_id == core_id) {
                            diagnostics.push(error(
                                line_no,
                                indent + 1,
                                format!("duplicate .core {core_id}"),
                            ));
                        } else {
                            program.sections.push(Section {
                                core_id,
                                instructions: Vec::new(),
                                source_lines: Vec::new(),
                            });
                        }
                    }
                    _ => diagnostics.push(error(line_no, indent + 1, format!("invalid core id `{id}`"))),
                },
                (Some("core"), _, _) => diagnostics.push(error(
                    line_no,
                    indent + 1,
                    ".core takes exactly one core id".to_string(),
                )),
                _ => diagnostics.push(error(
                    line_no,
                    indent + 1,
                    format!("unknown directive `.{}`", directive.split_whitespace().next().unwrap_or("")),
                )),
            }
            continue;
        }
        match parse_instruction_with(code, limits) {
            Ok(instr) => {
                if program.sections.is_empty() {
                    program.sections.push(Section::new(0, Vec::new()));
                }
                let section = program.sections.last_mut().unwrap();
                section.instructions.push(instr);
                section.source_lines.push(line_no);
            }
            Err(e) => diagnostics.push(error(line_no, e.column, e.message)),
        }
    }
    if diagnostics.is_empty() {
        Ok(program)
    } else {
        Err(diagnostics)
    }
}

/// Parses a single instruction line (comments allowed) with default limits.
pub fn parse_instruction(line: &str) -> Result<Instruction, LineError> {
    parse_instruction_with(line, &Limits::default())
}

pub fn parse_instruction_with(line: &str, limits: &Limits) -> Result<Instruction, LineError> {
    let code = line.split('#').next().unwrap_or("");
    let start = code.len() - code.trim_start().len();
    let rest = &code[start..];
    let mnemonic_len = rest.find(char::is_whitespace).unwrap_or(rest.len());
    let mnemonic = &rest[..mnemonic_len];
    if mnemonic.is_empty() {
        return Err(LineError::new(1, "expected an instruction"));
    }
    let opcode = Opcode::from_mnemonic(&mnemonic.to_ascii_lowercase())
        .ok_or_else(|| LineError::new(start + 1, format!("unknown mnemonic `{mnemonic}`")))?;

    let operand_start = start + mnemonic_len;
    let operands = split_operands(&code[operand_start..], operand_start);
    let instr = build(opcode, &operands, start + 1)?;
    if let Some(violation) = isa::validate_with(&instr, limits).into_iter().next() {
        return Err(LineError::new(start + 1, violation.to_string()));
    }
    Ok(instr)
}

struct Operand<'a> {
    text: &'a str,
    column: usize,
}

fn split_operands(text: &str, base: usize) -> Vec<Operand<'_>> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for piece in text.split(',') {
        let lead = piece.len() - piece.trim_start().len();
        out.push(Operand { text: piece.trim(), column: base + offset + lead + 1 });
        offset += piece.len() + 1;
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Reg,
    Imm,
    Offset,
}

fn signature(op: Opcode) -> &'static [Kind] {
    use Kind::*;
    use Opcode as O;
    match op {
        O::Sldi => &[Reg, Imm],
        O::Sld | O::Saddi | O::Smuli => &[Reg, Reg, Imm],
        O::Sadd | O::Ssub | O::Smul => &[Reg, Reg, Reg],
        O::Setbw | O::Wait | O::Sync => &[Imm, Imm],
        O::Mvmul => &[Reg, Reg, Imm, Imm, Imm],
        O::Vvadd | O::Vsub | O::Vmul | O::Vdmul | O::Vmax | O::Vvsll | O::Vvsra | O::Vrsu | O::Vrsl => {
            &[Reg, Reg, Reg, Imm, Offset]
        }
        O::Vavg => &[Reg, Reg, Reg, Imm, Imm],
        O::Vrelu | O::Vtanh | O::Vsigm => &[Reg, Reg, Imm, Offset],
        O::Vmv => &[Reg, Reg, Reg, Imm],
        O::Ld | O::St | O::Lmv => &[Reg, Reg, Imm, Offset],
        O::Ldi | O::Send | O::Recv => &[Reg, Imm, Imm, Imm],
    }
}

enum Value {
    Reg(Reg),
    Imm(i64),
    Offset(Offset),
}

fn build(op: Opcode, operands: &[Operand<'_>], column: usize) -> Result<Instruction, LineError> {
    let sig = signature(op);
    let required = sig.iter().filter(|k| **k != Kind::Offset).count();
    if operands.len() < required || operands.len() > sig.len() {
        let expected = if required == sig.len() {
            format!("{required}")
        } else {
            format!("{required} or {}", sig.len())
        };
        return Err(LineError::new(
            column,
            format!("{op} expects {expected} operands, found {}", operands.len()),
        ));
    }
    let mut values = Vec::with_capacity(sig.len());
    for (kind, operand) in sig.iter().zip(operands) {
        values.push(match kind {
            Kind::Reg => Value::Reg(parse_reg(operand)?),
            Kind::Imm => Value::Imm(parse_int(operand.text).ok_or_else(|| {
                LineError::new(operand.column, format!("invalid immediate `{}`", operand.text))
            })?),
            Kind::Offset => Value::Offset(parse_offset(operand)?),
        });
    }
    if values.len() < sig.len() {
        values.push(Value::Offset(Offset::NONE));
    }
    let reg = |i: usize| match values[i] {
        Value::Reg(r) => r,
        _ => unreachable!(),
    };
    let offset = |i: usize| match values[i] {
        Value::Offset(o) => o,
        _ => unreachable!(),
    };
    let imm = |i: usize, field: &str, min: i64, max: i64| -> Result<i64, LineError> {
        let Value::Imm(v) = values[i] else { unreachable!() };
        if v < min || v > max {
            Err(LineError::new(
                operands[i].column,
                format!("immediate {v} out of range for {field} ({min}..={max})"),
            ))
        } else {
            Ok(v)
        }
    };
    let u8f = |i, field| imm(i, field, 0, 255).map(|v| v as u8);
    let u16f = |i, field| imm(i, field, 0, 65535).map(|v| v as u16);
    // accepts both the signed and the unsigned reading of a 32-bit pattern
    let i32f = |i| imm(i, "imm", i64::from(i32::MIN), i64::from(u32::MAX)).map(|v| v as u32 as i32);

    use Instruction as I;
    let vec = || -> Result<VecOperands, LineError> {
        Ok(VecOperands { rd: reg(0), rs1: reg(1), rs2: reg(2), len: u16f(3, "imm_len")?, offset: offset(4) })
    };
    let unary = || -> Result<UnaryOperands, LineError> {
        Ok(UnaryOperands { rd: reg(0), rs1: reg(1), len: u16f(2, "imm_len")?, offset: offset(3) })
    };
    let copy = || -> Result<CopyOperands, LineError> {
        Ok(CopyOperands { rd: reg(0), rs1: reg(1), size: u16f(2, "imm_size")?, offset: offset(3) })
    };
    Ok(match op {
        Opcode::Sldi => I::Sldi { rd: reg(0), imm: i32f(1)? },
        Opcode::Sld => I::Sld { rd: reg(0), rs1: reg(1), offset: u16f(2, "offset_byte")? },
        Opcode::Sadd => I::Sadd { rd: reg(0), rs1: reg(1), rs2: reg(2) },
        Opcode::Ssub => I::Ssub { rd: reg(0), rs1: reg(1), rs2: reg(2) },
        Opcode::Smul => I::Smul { rd: reg(0), rs1: reg(1), rs2: reg(2) },
        Opcode::Saddi => I::Saddi { rd: reg(0), rs1: reg(1), imm: i32f(2)? },
        Opcode::Smuli => I::Smuli { rd: reg(0), rs1: reg(1), imm: i32f(2)? },
        Opcode::Setbw => I::Setbw { ibiw: u8f(0, "ibiw")?, obiw: u8f(1, "obiw")? },
        Opcode::Mvmul => I::Mvmul {
            rd: reg(0),
            rs1: reg(1),
            mbiw: u8f(2, "mbiw")?,
            relu: u8f(3, "imm_relu")?,
            group: u16f(4, "imm_group")?,
        },
        Opcode::Vvadd => I::Vvadd(vec()?),
        Opcode::Vsub => I::Vsub(vec()?),
        Opcode::Vmul => I::Vmul(vec()?),
        Opcode::Vdmul => I::Vdmul(vec()?),
        Opcode::Vmax => I::Vmax(vec()?),
        Opcode::Vvsll => I::Vvsll(vec()?),
        Opcode::Vvsra => I::Vvsra(vec()?),
        Opcode::Vavg => I::Vavg {
            rd: reg(0),
            rs1: reg(1),
            rs2: reg(2),
            len: u16f(3, "imm_len")?,
            offset: u16f(4, "offset_value")?,
        },
        Opcode::Vrelu => I::Vrelu(unary()?),
        Opcode::Vtanh => I::Vtanh(unary()?),
        Opcode::Vsigm => I::Vsigm(unary()?),
        Opcode::Vmv => I::Vmv { rd: reg(0), rs1: reg(1), rs2: reg(2), len: u16f(3, "imm_len")? },
        Opcode::Vrsu => I::Vrsu(vec()?),
        Opcode::Vrsl => I::Vrsl(vec()?),
        Opcode::Ld => I::Ld(copy()?),
        Opcode::St => I::St(copy()?),
        Opcode::Ldi => I::Ldi {
            rd: reg(0),
            imm: imm(1, "imm", -128, 255)? as u8,
            size: u16f(2, "imm_size")?,
            offset: u16f(3, "offset_byte")?,
        },
        Opcode::Lmv => I::Lmv(copy()?),
        Opcode::Send => I::Send {
            rs1: reg(0),
            core: u16f(1, "imm_core")?,
            size: u16f(2, "imm_size")?,
            offset: u16f(3, "offset_byte")?,
        },
        Opcode::Recv => I::Recv {
            rd: reg(0),
            core: u16f(1, "imm_core")?,
            size: u16f(2, "imm_size")?,
            offset: u16f(3, "offset_byte")?,
        },
        Opcode::Wait => I::Wait { ev: u8f(0, "imm_ev")?, val: u16f(1, "imm_val")? },
        Opcode::Sync => I::Sync { ev: u8f(0, "imm_ev")?, core: u16f(1, "imm_core")? },
    })
}

fn parse_reg(operand: &Operand<'_>) -> Result<Reg, LineError> {
    let digits = operand.text.strip_prefix("$r").ok_or_else(|| {
        LineError::new(operand.column, format!("expected a register, found `{}`", operand.text))
    })?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.len() > 3 {
        return Err(LineError::new(operand.column, format!("invalid register `{}`", operand.text)));
    }
    let index: u16 = digits.parse().unwrap();
    u8::try_from(index)
        .ok()
        .and_then(Reg::new)
        .ok_or_else(|| LineError::new(operand.column, format!("register `{}` out of range", operand.text)))
}

fn parse_offset(operand: &Operand<'_>) -> Result<Offset, LineError> {
    let bad = || {
        LineError::new(operand.column, format!("invalid offset `{}`, expected [select:value]", operand.text))
    };
    let inner = operand.text.strip_prefix('[').and_then(|t| t.strip_suffix(']')).ok_or_else(bad)?;
    let (select, value) = inner.split_once(':').ok_or_else(bad)?;
    let select = select.trim();
    let select = select.strip_prefix("0b").unwrap_or(select);
    if select.is_empty() || select.len() > 3 || !select.bytes().all(|b| b == b'0' || b == b'1') {
        return Err(LineError::new(operand.column, format!("invalid offset select `{select}`")));
    }
    let select = u8::from_str_radix(select, 2).map_err(|_| bad())?;
    let value = parse_int(value.trim()).ok_or_else(bad)?;
    let value = u16::try_from(value).map_err(|_| {
        LineError::new(operand.column, format!("offset value {value} out of range (0..=65535)"))
    })?;
    Ok(Offset::new(select, value))
}

/// Parses a decimal, `0x` hex or `0b` binary integer with optional sign and
/// `_` separators.
pub fn parse_int(text: &str) -> Option<i64> {
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let (radix, digits) = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        (16, h)
    } else if let Some(b) = body.strip_prefix("0b").or_else(|| body.strip_prefix("0B")) {
        (2, b)
    } else {
        (10, body)
    };
    let digits: String = digits.chars().filter(|c| *c != '_').collect();
    if digits.is_empty() || !digits.chars().all(|c| c.is_digit(radix)) {
        return None;
    }
    let magnitude = i128::from_str_radix(&digits, radix).ok()?;
    let value = if negative { -magnitude } else { magnitude };
    i64::try_from(value).ok()
}

/// Canonical text for a whole program. Sections are separated by a blank line.
pub fn disassemble(program: &SourceProgram) -> String {
    let mut out = String::new();
    for (i, section) in program.sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!(".core {}\n", section.core_id));
        for instr in &section.instructions {
            out.push_str(&instr.to_string());
            out.push('\n');
        }
    }
    out
}

struct OffsetText(Offset);

impl fmt::Display for OffsetText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_zero() {
            Ok(())
        } else {
            write!(f, ", [0b{:03b}:{}]", self.0.select, self.0.value)
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let m = self.mnemonic();
        match *self {
            Sldi { rd, imm } => write!(f, "{m} {rd}, {imm}"),
            Sld { rd, rs1, offset } => write!(f, "{m} {rd}, {rs1}, {offset}"),
            Sadd { rd, rs1, rs2 } | Ssub { rd, rs1, rs2 } | Smul { rd, rs1, rs2 } => {
                write!(f, "{m} {rd}, {rs1}, {rs2}")
            }
            Saddi { rd, rs1, imm } | Smuli { rd, rs1, imm } => write!(f, "{m} {rd}, {rs1}, {imm}"),
            Setbw { ibiw, obiw } => write!(f, "{m} {ibiw}, {obiw}"),
            Mvmul { rd, rs1, mbiw, relu, group } => {
                write!(f, "{m} {rd}, {rs1}, {mbiw}, {relu}, {group}")
            }
            Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
                write!(f, "{m} {}, {}, {}, {}{}", v.rd, v.rs1, v.rs2, v.len, OffsetText(v.offset))
            }
            Vavg { rd, rs1, rs2, len, offset } => write!(f, "{m} {rd}, {rs1}, {rs2}, {len}, {offset}"),
            Vrelu(u) | Vtanh(u) | Vsigm(u) => {
                write!(f, "{m} {}, {}, {}{}", u.rd, u.rs1, u.len, OffsetText(u.offset))
            }
            Vmv { rd, rs1, rs2, len } => write!(f, "{m} {rd}, {rs1}, {rs2}, {len}"),
            Ld(c) | St(c) | Lmv(c) => {
                write!(f, "{m} {}, {}, {}{}", c.rd, c.rs1, c.size, OffsetText(c.offset))
            }
            Ldi { rd, imm, size, offset } => write!(f, "{m} {rd}, {imm}, {size}, {offset}"),
            Send { rs1, core, size, offset } => write!(f, "{m} {rs1}, {core}, {size}, {offset}"),
            Recv { rd, core, size, offset } => write!(f, "{m} {rd}, {core}, {size}, {offset}"),
            Wait { ev, val } => write!(f, "{m} {ev}, {val}"),
            Sync { ev, core } => write!(f, "{m} {ev}, {core}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u8) -> Reg {
        Reg::r(i)
    }

    #[test]
    fn single_instruction_section() {
        let p = assemble(".core 0\nsldi $r1, 42").unwrap();
        assert_eq!(p.sections.len(), 1);
        assert_eq!(p.sections[0].core_id, 0);
        assert_eq!(p.sections[0].instructions, vec![Instruction::Sldi { rd: r(1), imm: 42 }]);
        assert_eq!(p.sections[0].source_lines, vec![2]);
    }

    #[test]
    fn offset_operand() {
        let i = parse_instruction("vvadd $r1, $r2, $r3, 16, [0b011:8]").unwrap();
        assert_eq!(
            i,
            Instruction::Vvadd(VecOperands {
                rd: r(1),
                rs1: r(2),
                rs2: r(3),
                len: 16,
                offset: Offset::new(0b011, 8),
            })
        );
        assert_eq!(i.to_string(), "vvadd $r1, $r2, $r3, 16, [0b011:8]");
        assert_eq!(parse_instruction("vvadd $r1,$r2,$r3,16,[11:0x8]").unwrap(), i);
    }

    #[test]
    fn odd_sld_base_is_diagnosed() {
        let diags = assemble(".core 0\nsld $r0, $r3, 4").unwrap_err();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].line, 2);
        assert!(diags[0].message.contains("rs1 must be an even register"), "{}", diags[0].message);
    }

    #[test]
    fn canonical_printing() {
        let p = SourceProgram {
            sections: vec![Section::new(0, vec![Instruction::Sadd { rd: r(3), rs1: r(1), rs2: r(2) }])],
        };
        assert_eq!(disassemble(&p), ".core 0\nsadd $r3, $r1, $r2\n");
        let empty = SourceProgram { sections: vec![Section::new(0, vec![])] };
        assert_eq!(disassemble(&empty), ".core 0\n");
        assert!(assemble(&disassemble(&empty)).unwrap().same_code(&empty));
    }

    #[test]
    fn diagnostics_cover_common_mistakes() {
        let src = "\
.core 0
jmp $r1
sadd $r1, $r2
sadd $r1, $r2, $r32
ldi $r1, 256, 4, 0
.core 0
mvmul $r1, $r2, 8, 2, 0
";
        let diags = assemble(src).unwrap_err();
        let lines: Vec<_> = diags.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![2, 3, 4, 5, 6, 7]);
        assert!(diags[0].message.contains("unknown mnemonic"));
        assert!(diags[1].message.contains("expects 3 operands"));
        assert!(diags[2].message.contains("out of range"));
        assert_eq!(diags[2].column, 16);
        assert!(diags[3].message.contains("out of range"));
        assert!(diags[4].message.contains("duplicate"));
        assert!(diags[5].message.contains("imm_relu"));
    }

    #[test]
    fn line_endings_do_not_matter() {
        let unix = assemble(".core 1\nsldi $r1, 1\nsldi $r2, 2\n").unwrap();
        let dos = assemble(".core 1\r\nsldi $r1, 1\r\nsldi $r2, 2\r\n").unwrap();
        let mac = assemble(".core 1\rsldi $r1, 1\rsldi $r2, 2\r").unwrap();
        assert_eq!(unix, dos);
        assert_eq!(unix, mac);
    }

    #[test]
    fn comments_and_implicit_section() {
        let p = assemble("# header\n  sldi $r1, -0x10 # trailing\n").unwrap();
        assert_eq!(p.sections[0].core_id, 0);
        assert_eq!(p.sections[0].instructions, vec![Instruction::Sldi { rd: r(1), imm: -16 }]);
    }

    #[test]
    fn unsigned_imm32_pattern_maps_to_twos_complement() {
        let i = parse_instruction("sldi $r1, 0xffffffff").unwrap();
        assert_eq!(i, Instruction::Sldi { rd: r(1), imm: -1 });
        assert!(parse_instruction("sldi $r1, 0x100000000").is_err());
    }

    #[test]
    fn parse_int_forms() {
        assert_eq!(parse_int("42"), Some(42));
        assert_eq!(parse_int("-0x1F"), Some(-31));
        assert_eq!(parse_int("0b1010"), Some(10));
        assert_eq!(parse_int("1_000"), Some(1000));
        assert_eq!(parse_int("0x"), None);
        assert_eq!(parse_int("12a"), None);
        assert_eq!(parse_int("99999999999999999999999"), None);
    }
}
