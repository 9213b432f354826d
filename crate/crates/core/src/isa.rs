//! Instruction model and the fixed-length binary encoding.
//!
//! Every instruction is either a 64-bit or a 32-bit word. The 64-bit layout
//! keeps each field at the same position for every opcode:
//!
//! ```text
//!  63    58 57  53 52  48 47  43 42   40 39   32 31            0
//! | opcode |  rd  |  rs1 |  rs2 | select |  aux8 |   imm area    |
//! ```
//!
//! The imm area is split per opcode:
//!
//! | opcodes                    | aux8              | imm[31:16]  | imm[15:0]          |
//! |----------------------------|-------------------|-------------|--------------------|
//! | sldi, saddi, smuli         | -                 | imm32 (signed, whole area)       |
//! | sld                        | -                 | -           | offset_byte        |
//! | vector ops, vavg, vmv      | -                 | imm_len     | offset_value       |
//! | ld, st, lmv                | -                 | imm_size    | offset_value       |
//! | ldi                        | imm8              | imm_size    | offset_byte        |
//! | mvmul                      | relu<<6 \| mbiw   | imm_group   | -                  |
//! | setbw                      | ibiw              | -           | obiw (bits 7:0)    |
//! | send, recv                 | imm_core          | imm_size    | offset_byte        |
//! | wait, sync                 | imm_ev            | -           | imm_val / imm_core |
//!
//! The 32-bit layout has no offset mechanism. Register slots sit at
//! `rd[25:21] rs1[20:16] rs2[15:11]` and the remaining immediate is an 11-bit
//! field at `[10:0]`; the per-opcode placement is documented on
//! [`encode`]. Unused bits must be zero; decoding rejects anything else.

use std::fmt;

use thiserror::Error;

/// Number of architectural registers.
pub const REGISTER_COUNT: usize = 32;

/// Default number of event registers per core.
pub const DEFAULT_EVENT_REGISTERS: usize = 16;

/// Maximum element bit-width accepted by `setbw` and `mvmul`.
pub const MAX_BIT_WIDTH: u8 = 32;

/// A register index in `0..32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const fn new(index: u8) -> Option<Reg> {
        if (index as usize) < REGISTER_COUNT {
            Some(Reg(index))
        } else {
            None
        }
    }

    /// Panics on an out-of-range index; meant for constants and tests.
    pub const fn r(index: u8) -> Reg {
        assert!((index as usize) < REGISTER_COUNT, "register index out of range");
        Reg(index)
    }

    pub const fn index(self) -> u8 {
        self.0
    }

    pub const fn is_even(self) -> bool {
        self.0.is_multiple_of(2)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "$r{}", self.0)
    }
}

/// Operand slot addressed by an offset-select bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Rd,
    Rs1,
    Rs2,
}

impl Slot {
    const fn bit(self) -> u8 {
        match self {
            Slot::Rd => 0b001,
            Slot::Rs1 => 0b010,
            Slot::Rs2 => 0b100,
        }
    }
}

/// Offset operand: a 3-bit register select mask and a single offset value
/// shared by every selected register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Offset {
    pub select: u8,
    pub value: u16,
}

impl Offset {
    pub const NONE: Offset = Offset { select: 0, value: 0 };

    pub const fn new(select: u8, value: u16) -> Offset {
        Offset { select, value }
    }

    pub const fn applies_to(self, slot: Slot) -> bool {
        self.select & slot.bit() != 0
    }

    pub const fn is_zero(self) -> bool {
        self.select == 0 && self.value == 0
    }
}

/// Operands shared by the three-register vector instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VecOperands {
    pub rd: Reg,
    pub rs1: Reg,
    pub rs2: Reg,
    pub len: u16,
    pub offset: Offset,
}

/// Operands of the single-source vector instructions (`vrelu`, `vtanh`, `vsigm`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnaryOperands {
    pub rd: Reg,
    pub rs1: Reg,
    pub len: u16,
    pub offset: Offset,
}

/// Operands of the block copies `ld`, `st` and `lmv`. Offsets are byte offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CopyOperands {
    pub rd: Reg,
    pub rs1: Reg,
    pub size: u16,
    pub offset: Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Sldi = 0,
    Sld,
    Sadd,
    Ssub,
    Smul,
    Saddi,
    Smuli,
    Setbw,
    Mvmul,
    Vvadd,
    Vsub,
    Vmul,
    Vdmul,
    Vmax,
    Vvsll,
    Vvsra,
    Vavg,
    Vrelu,
    Vtanh,
    Vsigm,
    Vmv,
    Vrsu,
    Vrsl,
    Ld,
    St,
    Ldi,
    Lmv,
    Send,
    Recv,
    Wait,
    Sync,
}

impl Opcode {
    pub const ALL: [Opcode; 31] = [
        Opcode::Sldi,
        Opcode::Sld,
        Opcode::Sadd,
        Opcode::Ssub,
        Opcode::Smul,
        Opcode::Saddi,
        Opcode::Smuli,
        Opcode::Setbw,
        Opcode::Mvmul,
        Opcode::Vvadd,
        Opcode::Vsub,
        Opcode::Vmul,
        Opcode::Vdmul,
        Opcode::Vmax,
        Opcode::Vvsll,
        Opcode::Vvsra,
        Opcode::Vavg,
        Opcode::Vrelu,
        Opcode::Vtanh,
        Opcode::Vsigm,
        Opcode::Vmv,
        Opcode::Vrsu,
        Opcode::Vrsl,
        Opcode::Ld,
        Opcode::St,
        Opcode::Ldi,
        Opcode::Lmv,
        Opcode::Send,
        Opcode::Recv,
        Opcode::Wait,
        Opcode::Sync,
    ];

    pub fn from_bits(bits: u8) -> Option<Opcode> {
        Opcode::ALL.get(bits as usize).copied()
    }

    pub const fn bits(self) -> u8 {
        self as u8
    }

    pub const fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Sldi => "sldi",
            Opcode::Sld => "sld",
            Opcode::Sadd => "sadd",
            Opcode::Ssub => "ssub",
            Opcode::Smul => "smul",
            Opcode::Saddi => "saddi",
            Opcode::Smuli => "smuli",
            Opcode::Setbw => "setbw",
            Opcode::Mvmul => "mvmul",
            Opcode::Vvadd => "vvadd",
            Opcode::Vsub => "vsub",
            Opcode::Vmul => "vmul",
            Opcode::Vdmul => "vdmul",
            Opcode::Vmax => "vmax",
            Opcode::Vvsll => "vvsll",
            Opcode::Vvsra => "vvsra",
            Opcode::Vavg => "vavg",
            Opcode::Vrelu => "vrelu",
            Opcode::Vtanh => "vtanh",
            Opcode::Vsigm => "vsigm",
            Opcode::Vmv => "vmv",
            Opcode::Vrsu => "vrsu",
            Opcode::Vrsl => "vrsl",
            Opcode::Ld => "ld",
            Opcode::St => "st",
            Opcode::Ldi => "ldi",
            Opcode::Lmv => "lmv",
            Opcode::Send => "send",
            Opcode::Recv => "recv",
            Opcode::Wait => "wait",
            Opcode::Sync => "sync",
        }
    }

    pub fn from_mnemonic(name: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == name)
    }

    /// Instructions that only exist on hardware with variable bit-width.
    pub const fn needs_variable_bitwidth(self) -> bool {
        matches!(self, Opcode::Setbw | Opcode::Vrsu | Opcode::Vrsl)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Sldi { rd: Reg, imm: i32 },
    Sld { rd: Reg, rs1: Reg, offset: u16 },
    Sadd { rd: Reg, rs1: Reg, rs2: Reg },
    Ssub { rd: Reg, rs1: Reg, rs2: Reg },
    Smul { rd: Reg, rs1: Reg, rs2: Reg },
    Saddi { rd: Reg, rs1: Reg, imm: i32 },
    Smuli { rd: Reg, rs1: Reg, imm: i32 },
    Setbw { ibiw: u8, obiw: u8 },
    Mvmul { rd: Reg, rs1: Reg, mbiw: u8, relu: u8, group: u16 },
    Vvadd(VecOperands),
    Vsub(VecOperands),
    Vmul(VecOperands),
    Vdmul(VecOperands),
    Vmax(VecOperands),
    Vvsll(VecOperands),
    Vvsra(VecOperands),
    Vavg { rd: Reg, rs1: Reg, rs2: Reg, len: u16, offset: u16 },
    Vrelu(UnaryOperands),
    Vtanh(UnaryOperands),
    Vsigm(UnaryOperands),
    Vmv { rd: Reg, rs1: Reg, rs2: Reg, len: u16 },
    Vrsu(VecOperands),
    Vrsl(VecOperands),
    Ld(CopyOperands),
    St(CopyOperands),
    Ldi { rd: Reg, imm: u8, size: u16, offset: u16 },
    Lmv(CopyOperands),
    Send { rs1: Reg, core: u16, size: u16, offset: u16 },
    Recv { rd: Reg, core: u16, size: u16, offset: u16 },
    Wait { ev: u8, val: u16 },
    Sync { ev: u8, core: u16 },
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        use Instruction::*;
        match self {
            Sldi { .. } => Opcode::Sldi,
            Sld { .. } => Opcode::Sld,
            Sadd { .. } => Opcode::Sadd,
            Ssub { .. } => Opcode::Ssub,
            Smul { .. } => Opcode::Smul,
            Saddi { .. } => Opcode::Saddi,
            Smuli { .. } => Opcode::Smuli,
            Setbw { .. } => Opcode::Setbw,
            Mvmul { .. } => Opcode::Mvmul,
            Vvadd(_) => Opcode::Vvadd,
            Vsub(_) => Opcode::Vsub,
            Vmul(_) => Opcode::Vmul,
            Vdmul(_) => Opcode::Vdmul,
            Vmax(_) => Opcode::Vmax,
            Vvsll(_) => Opcode::Vvsll,
            Vvsra(_) => Opcode::Vvsra,
            Vavg { .. } => Opcode::Vavg,
            Vrelu(_) => Opcode::Vrelu,
            Vtanh(_) => Opcode::Vtanh,
            Vsigm(_) => Opcode::Vsigm,
            Vmv { .. } => Opcode::Vmv,
            Vrsu(_) => Opcode::Vrsu,
            Vrsl(_) => Opcode::Vrsl,
            Ld(_) => Opcode::Ld,
            St(_) => Opcode::St,
            Ldi { .. } => Opcode::Ldi,
            Lmv(_) => Opcode::Lmv,
            Send { .. } => Opcode::Send,
            Recv { .. } => Opcode::Recv,
            Wait { .. } => Opcode::Wait,
            Sync { .. } => Opcode::Sync,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        self.opcode().mnemonic()
    }

    /// True when any offset field (select mask, offset value or byte offset)
    /// is nonzero.
    pub fn has_offset(&self) -> bool {
        use Instruction::*;
        match *self {
            Sld { offset, .. } | Vavg { offset, .. } | Ldi { offset, .. } => offset != 0,
            Send { offset, .. } | Recv { offset, .. } => offset != 0,
            Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
                !v.offset.is_zero()
            }
            Vrelu(u) | Vtanh(u) | Vsigm(u) => !u.offset.is_zero(),
            Ld(c) | St(c) | Lmv(c) => !c.offset.is_zero(),
            _ => false,
        }
    }

    /// Copy of the instruction with every offset field cleared.
    pub fn without_offset(mut self) -> Instruction {
        use Instruction::*;
        match &mut self {
            Sld { offset, .. }
            | Vavg { offset, .. }
            | Ldi { offset, .. }
            | Send { offset, .. }
            | Recv { offset, .. } => *offset = 0,
            Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
                v.offset = Offset::NONE
            }
            Vrelu(u) | Vtanh(u) | Vsigm(u) => u.offset = Offset::NONE,
            Ld(c) | St(c) | Lmv(c) => c.offset = Offset::NONE,
            _ => {}
        }
        self
    }

    /// Writes the destination register, if this is a scalar instruction.
    pub fn scalar_destination(&self) -> Option<Reg> {
        use Instruction::*;
        match *self {
            Sldi { rd, .. }
            | Sld { rd, .. }
            | Sadd { rd, .. }
            | Ssub { rd, .. }
            | Smul { rd, .. }
            | Saddi { rd, .. }
            | Smuli { rd, .. } => Some(rd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EncodingMode {
    #[default]
    Word64,
    Word32,
}

impl EncodingMode {
    pub const fn word_bytes(self) -> usize {
        match self {
            EncodingMode::Word64 => 8,
            EncodingMode::Word32 => 4,
        }
    }

    const fn tag(self) -> u8 {
        match self {
            EncodingMode::Word64 => 0,
            EncodingMode::Word32 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("field `{field}` value {value} exceeds maximum {max}")]
    FieldOverflow { field: &'static str, value: i64, max: i64 },
    #[error("field `{field}` value {value} outside {min}..={max}")]
    FieldOutOfRange { field: &'static str, value: i64, min: i64, max: i64 },
    #[error("offsets are not supported in 32-bit mode")]
    OffsetUnsupportedIn32BitMode,
    #[error("{op}: {field} must be an even register")]
    EvenRegisterRequired { op: &'static str, field: &'static str },
    #[error("word {0:#x} does not fit the 32-bit encoding")]
    WordTooWide(u64),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("{opcode}: reserved field `{field}` is nonzero")]
    ReservedFieldNonzero { opcode: Opcode, field: &'static str },
}

/// Limits an instruction is checked against beyond its own field widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub event_registers: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { event_registers: DEFAULT_EVENT_REGISTERS }
    }
}

/// Static checks with default limits. Returns every violation found.
pub fn validate(instr: &Instruction) -> Vec<IsaError> {
    validate_with(instr, &Limits::default())
}

pub fn validate_with(instr: &Instruction, limits: &Limits) -> Vec<IsaError> {
    use Instruction::*;
    let mut out = Vec::new();
    let op = instr.mnemonic();
    let even = |reg: Reg, field: &'static str, out: &mut Vec<IsaError>| {
        if !reg.is_even() {
            out.push(IsaError::EvenRegisterRequired { op, field });
        }
    };
    let width = |field: &'static str, value: u8, out: &mut Vec<IsaError>| {
        if value == 0 || value > MAX_BIT_WIDTH {
            out.push(IsaError::FieldOutOfRange {
                field,
                value: value.into(),
                min: 1,
                max: MAX_BIT_WIDTH.into(),
            });
        }
    };
    let max = |field: &'static str, value: u64, max: u64, out: &mut Vec<IsaError>| {
        if value > max {
            out.push(IsaError::FieldOverflow { field, value: value as i64, max: max as i64 });
        }
    };
    match *instr {
        Sld { rs1, .. } => even(rs1, "rs1", &mut out),
        Ld(c) => even(c.rs1, "rs1", &mut out),
        St(c) => even(c.rd, "rd", &mut out),
        Setbw { ibiw, obiw } => {
            width("ibiw", ibiw, &mut out);
            width("obiw", obiw, &mut out);
        }
        Mvmul { mbiw, relu, .. } => {
            width("mbiw", mbiw, &mut out);
            max("imm_relu", relu.into(), 1, &mut out);
        }
        Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
            max("offset_select", v.offset.select.into(), 0b111, &mut out)
        }
        Vrelu(u) | Vtanh(u) | Vsigm(u) => max("offset_select", u.offset.select.into(), 0b111, &mut out),
        Lmv(c) => max("offset_select", c.offset.select.into(), 0b111, &mut out),
        Send { core, .. } | Recv { core, .. } => max("imm_core", core.into(), 0xff, &mut out),
        Wait { ev, .. } | Sync { ev, .. } => {
            max("imm_ev", ev.into(), limits.event_registers.saturating_sub(1) as u64, &mut out)
        }
        _ => {}
    }
    if let Ld(c) | St(c) = instr {
        max("offset_select", c.offset.select.into(), 0b111, &mut out);
    }
    out
}

fn check_encodable(instr: &Instruction, mode: EncodingMode) -> Result<(), IsaError> {
    use Instruction::*;
    // bit widths in 1..=32 are a semantic rule; the fields themselves hold more
    if let Some(err) = validate_with(instr, &Limits { event_registers: 256 })
        .into_iter()
        .find(|e| !matches!(e, IsaError::FieldOutOfRange { .. }))
    {
        return Err(err);
    }
    if let Mvmul { mbiw, .. } = instr {
        if *mbiw > 63 {
            return Err(IsaError::FieldOverflow { field: "mbiw", value: (*mbiw).into(), max: 63 });
        }
    }
    if mode == EncodingMode::Word64 {
        return Ok(());
    }
    if instr.has_offset() {
        return Err(IsaError::OffsetUnsupportedIn32BitMode);
    }
    let fit = |field: &'static str, value: i64, max: i64| -> Result<(), IsaError> {
        if value > max {
            Err(IsaError::FieldOverflow { field, value, max })
        } else {
            Ok(())
        }
    };
    const IMM11: i64 = 0x7ff;
    match *instr {
        Sldi { imm, .. } | Saddi { imm, .. } | Smuli { imm, .. } => {
            if i16::try_from(imm).is_err() {
                return Err(IsaError::FieldOutOfRange {
                    field: "imm",
                    value: imm.into(),
                    min: i16::MIN.into(),
                    max: i16::MAX.into(),
                });
            }
        }
        Mvmul { group, .. } => fit("imm_group", group.into(), 0x1ff)?,
        Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
            fit("imm_len", v.len.into(), IMM11)?
        }
        Vavg { len, .. } | Vmv { len, .. } => fit("imm_len", len.into(), IMM11)?,
        Vrelu(u) | Vtanh(u) | Vsigm(u) => fit("imm_len", u.len.into(), IMM11)?,
        Ld(c) | St(c) | Lmv(c) => fit("imm_size", c.size.into(), IMM11)?,
        Ldi { size, .. } => fit("imm_size", size.into(), IMM11)?,
        Send { core, size, .. } | Recv { core, size, .. } => {
            fit("imm_core", core.into(), 0x1f)?;
            fit("imm_size", size.into(), IMM11)?;
        }
        _ => {}
    }
    Ok(())
}

/// Encodes an instruction into the low `mode.word_bytes()` bytes of a `u64`.
///
/// 32-bit placement of immediates, beyond the register slots:
/// `sldi/saddi/smuli` imm16 at `[15:0]`; `setbw` ibiw at `[15:8]`, obiw at
/// `[7:0]`; `mvmul` mbiw at `[15:10]`, relu at `[9]`, group at `[8:0]`;
/// `ldi` imm8 at `[18:11]`, size at `[10:0]`; `send/recv` core in the rs2
/// slot and size at `[10:0]`; `wait/sync` ev at `[23:16]`, val/core at
/// `[15:0]`; every other length or size at `[10:0]`.
pub fn encode(instr: &Instruction, mode: EncodingMode) -> Result<u64, IsaError> {
    check_encodable(instr, mode)?;
    Ok(match mode {
        EncodingMode::Word64 => pack64(instr),
        EncodingMode::Word32 => pack32(instr).into(),
    })
}

/// Raw field values of one 64-bit word.
#[derive(Default)]
struct Fields64 {
    rd: u8,
    rs1: u8,
    rs2: u8,
    select: u8,
    aux: u8,
    imm: u32,
}

fn hi_lo(hi: u16, lo: u16) -> u32 {
    (u32::from(hi) << 16) | u32::from(lo)
}

fn pack64(instr: &Instruction) -> u64 {
    use Instruction::*;
    let f = match *instr {
        Sldi { rd, imm } => Fields64 { rd: rd.0, imm: imm as u32, ..Default::default() },
        Sld { rd, rs1, offset } => {
            Fields64 { rd: rd.0, rs1: rs1.0, imm: offset.into(), ..Default::default() }
        }
        Sadd { rd, rs1, rs2 } | Ssub { rd, rs1, rs2 } | Smul { rd, rs1, rs2 } => {
            Fields64 { rd: rd.0, rs1: rs1.0, rs2: rs2.0, ..Default::default() }
        }
        Saddi { rd, rs1, imm } | Smuli { rd, rs1, imm } => {
            Fields64 { rd: rd.0, rs1: rs1.0, imm: imm as u32, ..Default::default() }
        }
        Setbw { ibiw, obiw } => Fields64 { aux: ibiw, imm: obiw.into(), ..Default::default() },
        Mvmul { rd, rs1, mbiw, relu, group } => Fields64 {
            rd: rd.0,
            rs1: rs1.0,
            aux: ((relu & 1) << 6) | (mbiw & 0x3f),
            imm: hi_lo(group, 0),
            ..Default::default()
        },
        Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
            Fields64 {
                rd: v.rd.0,
                rs1: v.rs1.0,
                rs2: v.rs2.0,
                select: v.offset.select,
                imm: hi_lo(v.len, v.offset.value),
                ..Default::default()
            }
        }
        Vavg { rd, rs1, rs2, len, offset } => {
            Fields64 { rd: rd.0, rs1: rs1.0, rs2: rs2.0, imm: hi_lo(len, offset), ..Default::default() }
        }
        Vrelu(u) | Vtanh(u) | Vsigm(u) => Fields64 {
            rd: u.rd.0,
            rs1: u.rs1.0,
            select: u.offset.select,
            imm: hi_lo(u.len, u.offset.value),
            ..Default::default()
        },
        Vmv { rd, rs1, rs2, len } => {
            Fields64 { rd: rd.0, rs1: rs1.0, rs2: rs2.0, imm: hi_lo(len, 0), ..Default::default() }
        }
        Ld(c) | St(c) | Lmv(c) => Fields64 {
            rd: c.rd.0,
            rs1: c.rs1.0,
            select: c.offset.select,
            imm: hi_lo(c.size, c.offset.value),
            ..Default::default()
        },
        Ldi { rd, imm, size, offset } => {
            Fields64 { rd: rd.0, aux: imm, imm: hi_lo(size, offset), ..Default::default() }
        }
        Send { rs1, core, size, offset } => {
            Fields64 { rs1: rs1.0, aux: core as u8, imm: hi_lo(size, offset), ..Default::default() }
        }
        Recv { rd, core, size, offset } => {
            Fields64 { rd: rd.0, aux: core as u8, imm: hi_lo(size, offset), ..Default::default() }
        }
        Wait { ev, val } => Fields64 { aux: ev, imm: val.into(), ..Default::default() },
        Sync { ev, core } => Fields64 { aux: ev, imm: core.into(), ..Default::default() },
    };
    (u64::from(instr.opcode().bits()) << 58)
        | (u64::from(f.rd & 0x1f) << 53)
        | (u64::from(f.rs1 & 0x1f) << 48)
        | (u64::from(f.rs2 & 0x1f) << 43)
        | (u64::from(f.select & 0x7) << 40)
        | (u64::from(f.aux) << 32)
        | u64::from(f.imm)
}

fn pack32(instr: &Instruction) -> u32 {
    use Instruction::*;
    let regs = |rd: Reg, rs1: Reg, rs2: Reg| {
        (u32::from(rd.0) << 21) | (u32::from(rs1.0) << 16) | (u32::from(rs2.0) << 11)
    };
    let z = Reg(0);
    let imm11 = |v: u16| u32::from(v) & 0x7ff;
    let body = match *instr {
        Sldi { rd, imm } => regs(rd, z, z) | (imm as u32 & 0xffff),
        Sld { rd, rs1, .. } => regs(rd, rs1, z),
        Sadd { rd, rs1, rs2 } | Ssub { rd, rs1, rs2 } | Smul { rd, rs1, rs2 } => regs(rd, rs1, rs2),
        Saddi { rd, rs1, imm } | Smuli { rd, rs1, imm } => regs(rd, rs1, z) | (imm as u32 & 0xffff),
        Setbw { ibiw, obiw } => (u32::from(ibiw) << 8) | u32::from(obiw),
        Mvmul { rd, rs1, mbiw, relu, group } => {
            regs(rd, rs1, z)
                | (u32::from(mbiw & 0x3f) << 10)
                | (u32::from(relu & 1) << 9)
                | (u32::from(group) & 0x1ff)
        }
        Vvadd(v) | Vsub(v) | Vmul(v) | Vdmul(v) | Vmax(v) | Vvsll(v) | Vvsra(v) | Vrsu(v) | Vrsl(v) => {
            regs(v.rd, v.rs1, v.rs2) | imm11(v.len)
        }
        Vavg { rd, rs1, rs2, len, .. } | Vmv { rd, rs1, rs2, len } => regs(rd, rs1, rs2) | imm11(len),
        Vrelu(u) | Vtanh(u) | Vsigm(u) => regs(u.rd, u.rs1, z) | imm11(u.len),
        Ld(c) | St(c) | Lmv(c) => regs(c.rd, c.rs1, z) | imm11(c.size),
        Ldi { rd, imm, size, .. } => regs(rd, z, z) | (u32::from(imm) << 11) | imm11(size),
        Send { rs1, core, size, .. } => regs(z, rs1, z) | ((u32::from(core) & 0x1f) << 11) | imm11(size),
        Recv { rd, core, size, .. } => regs(rd, z, z) | ((u32::from(core) & 0x1f) << 11) | imm11(size),
        Wait { ev, val } => (u32::from(ev) << 16) | u32::from(val),
        Sync { ev, core } => (u32::from(ev) << 16) | u32::from(core),
    };
    (u32::from(instr.opcode().bits()) << 26) | body
}

fn reg_at(word: u64, shift: u32) -> Reg {
    Reg(((word >> shift) & 0x1f) as u8)
}

/// Decodes one instruction word. Bits above the mode's width must be zero.
pub fn decode(word: u64, mode: EncodingMode) -> Result<Instruction, IsaError> {
    match mode {
        EncodingMode::Word64 => decode64(word),
        EncodingMode::Word32 => {
            let narrow = u32::try_from(word).map_err(|_| IsaError::WordTooWide(word))?;
            decode32(narrow)
        }
    }
}

fn decode64(word: u64) -> Result<Instruction, IsaError> {
    use Instruction::*;
    let bits = (word >> 58) as u8;
    let opcode = Opcode::from_bits(bits).ok_or(IsaError::UnknownOpcode(bits))?;
    let rd = reg_at(word, 53);
    let rs1 = reg_at(word, 48);
    let rs2 = reg_at(word, 43);
    let select = ((word >> 40) & 0x7) as u8;
    let aux = (word >> 32) as u8;
    let imm = word as u32;
    let hi = (imm >> 16) as u16;
    let lo = imm as u16;
    let vec = VecOperands { rd, rs1, rs2, len: hi, offset: Offset::new(select, lo) };
    let unary = UnaryOperands { rd, rs1, len: hi, offset: Offset::new(select, lo) };
    let copy = CopyOperands { rd, rs1, size: hi, offset: Offset::new(select, lo) };
    let instr = match opcode {
        Opcode::Sldi => Sldi { rd, imm: imm as i32 },
        Opcode::Sld => Sld { rd, rs1, offset: lo },
        Opcode::Sadd => Sadd { rd, rs1, rs2 },
        Opcode::Ssub => Ssub { rd, rs1, rs2 },
        Opcode::Smul => Smul { rd, rs1, rs2 },
        Opcode::Saddi => Saddi { rd, rs1, imm: imm as i32 },
        Opcode::Smuli => Smuli { rd, rs1, imm: imm as i32 },
        Opcode::Setbw => Setbw { ibiw: aux, obiw: imm as u8 },
        Opcode::Mvmul => Mvmul { rd, rs1, mbiw: aux & 0x3f, relu: (aux >> 6) & 1, group: hi },
        Opcode::Vvadd => Vvadd(vec),
        Opcode::Vsub => Vsub(vec),
        Opcode::Vmul => Vmul(vec),
        Opcode::Vdmul => Vdmul(vec),
        Opcode::Vmax => Vmax(vec),
        Opcode::Vvsll => Vvsll(vec),
        Opcode::Vvsra => Vvsra(vec),
        Opcode::Vavg => Vavg { rd, rs1, rs2, len: hi, offset: lo },
        Opcode::Vrelu => Vrelu(unary),
        Opcode::Vtanh => Vtanh(unary),
        Opcode::Vsigm => Vsigm(unary),
        Opcode::Vmv => Vmv { rd, rs1, rs2, len: hi },
        Opcode::Vrsu => Vrsu(vec),
        Opcode::Vrsl => Vrsl(vec),
        Opcode::Ld => Ld(copy),
        Opcode::St => St(copy),
        Opcode::Ldi => Ldi { rd, imm: aux, size: hi, offset: lo },
        Opcode::Lmv => Lmv(copy),
        Opcode::Send => Send { rs1, core: aux.into(), size: hi, offset: lo },
        Opcode::Recv => Recv { rd, core: aux.into(), size: hi, offset: lo },
        Opcode::Wait => Wait { ev: aux, val: lo },
        Opcode::Sync => Sync { ev: aux, core: lo },
    };
    let diff = pack64(&instr) ^ word;
    if diff != 0 {
        let field = match diff.trailing_zeros() {
            53..=57 => "rd",
            48..=52 => "rs1",
            43..=47 => "rs2",
            40..=42 => "offset_select",
            32..=39 => "aux",
            16..=31 => "imm_hi",
            _ => "imm_lo",
        };
        return Err(IsaError::ReservedFieldNonzero { opcode, field });
    }
    Ok(instr)
}

fn decode32(word: u32) -> Result<Instruction, IsaError> {
    use Instruction::*;
    let bits = (word >> 26) as u8;
    let opcode = Opcode::from_bits(bits).ok_or(IsaError::UnknownOpcode(bits))?;
    let w = u64::from(word);
    let rd = reg_at(w, 21);
    let rs1 = reg_at(w, 16);
    let rs2 = reg_at(w, 11);
    let imm11 = (word & 0x7ff) as u16;
    let imm16 = word as u16;
    let vec = VecOperands { rd, rs1, rs2, len: imm11, offset: Offset::NONE };
    let unary = UnaryOperands { rd, rs1, len: imm11, offset: Offset::NONE };
    let copy = CopyOperands { rd, rs1, size: imm11, offset: Offset::NONE };
    let core5 = u16::from(rs2.0);
    let instr = match opcode {
        Opcode::Sldi => Sldi { rd, imm: i32::from(imm16 as i16) },
        Opcode::Sld => Sld { rd, rs1, offset: 0 },
        Opcode::Sadd => Sadd { rd, rs1, rs2 },
        Opcode::Ssub => Ssub { rd, rs1, rs2 },
        Opcode::Smul => Smul { rd, rs1, rs2 },
        Opcode::Saddi => Saddi { rd, rs1, imm: i32::from(imm16 as i16) },
        Opcode::Smuli => Smuli { rd, rs1, imm: i32::from(imm16 as i16) },
        Opcode::Setbw => Setbw { ibiw: (word >> 8) as u8, obiw: word as u8 },
        Opcode::Mvmul => Mvmul {
            rd,
            rs1,
            mbiw: ((word >> 10) & 0x3f) as u8,
            relu: ((word >> 9) & 1) as u8,
            group: (word & 0x1ff) as u16,
        },
        Opcode::Vvadd => Vvadd(vec),
        Opcode::Vsub => Vsub(vec),
        Opcode::Vmul => Vmul(vec),
        Opcode::Vdmul => Vdmul(vec),
        Opcode::Vmax => Vmax(vec),
        Opcode::Vvsll => Vvsll(vec),
        Opcode::Vvsra => Vvsra(vec),
        Opcode::Vavg => Vavg { rd, rs1, rs2, len: imm11, offset: 0 },
        Opcode::Vrelu => Vrelu(unary),
        Opcode::Vtanh => Vtanh(unary),
        Opcode::Vsigm => Vsigm(unary),
        Opcode::Vmv => Vmv { rd, rs1, rs2, len: imm11 },
        Opcode::Vrsu => Vrsu(vec),
        Opcode::Vrsl => Vrsl(vec),
        Opcode::Ld => Ld(copy),
        Opcode::St => St(copy),
        Opcode::Ldi => Ldi { rd, imm: (word >> 11) as u8, size: imm11, offset: 0 },
        Opcode::Lmv => Lmv(copy),
        Opcode::Send => Send { rs1, core: core5, size: imm11, offset: 0 },
        Opcode::Recv => Recv { rd, core: core5, size: imm11, offset: 0 },
        Opcode::Wait => Wait { ev: (word >> 16) as u8, val: imm16 },
        Opcode::Sync => Sync { ev: (word >> 16) as u8, core: imm16 },
    };
    let diff = pack32(&instr) ^ word;
    if diff != 0 {
        let field = match diff.trailing_zeros() {
            21..=25 => "rd",
            16..=20 => "rs1",
            11..=15 => "rs2",
            _ => "imm",
        };
        return Err(IsaError::ReservedFieldNonzero { opcode, field });
    }
    Ok(instr)
}

/// Magic bytes opening a binary program stream.
pub const STREAM_MAGIC: [u8; 4] = *b"PIMI";
pub const STREAM_VERSION: u8 = 1;
const STREAM_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("bad magic bytes, expected \"PIMI\"")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown encoding mode tag {0}")]
    UnknownMode(u8),
    #[error("reserved header bytes are nonzero")]
    ReservedHeader,
    #[error("stream truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after the last instruction")]
    TrailingBytes(usize),
    #[error("instruction {index}: {source}")]
    Instruction {
        index: usize,
        #[source]
        source: IsaError,
    },
}

/// Serializes instructions into a `PIMI` stream: magic, version, mode tag,
/// two reserved bytes, a little-endian u32 count, then little-endian words.
pub fn write_stream(code: &[Instruction], mode: EncodingMode) -> Result<Vec<u8>, StreamError> {
    let width = mode.word_bytes();
    let mut out = Vec::with_capacity(STREAM_HEADER_LEN + code.len() * width);
    out.extend_from_slice(&STREAM_MAGIC);
    out.push(STREAM_VERSION);
    out.push(mode.tag());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(code.len() as u32).to_le_bytes());
    for (index, instr) in code.iter().enumerate() {
        let word = encode(instr, mode).map_err(|source| StreamError::Instruction { index, source })?;
        out.extend_from_slice(&word.to_le_bytes()[..width]);
    }
    Ok(out)
}

pub fn read_stream(bytes: &[u8]) -> Result<(EncodingMode, Vec<Instruction>), StreamError> {
    if bytes.len() < STREAM_HEADER_LEN {
        if !STREAM_MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
            return Err(StreamError::BadMagic);
        }
        return Err(StreamError::Truncated { expected: STREAM_HEADER_LEN, actual: bytes.len() });
    }
    if bytes[..4] != STREAM_MAGIC {
        return Err(StreamError::BadMagic);
    }
    if bytes[4] != STREAM_VERSION {
        return Err(StreamError::UnsupportedVersion(bytes[4]));
    }
    let mode = match bytes[5] {
        0 => EncodingMode::Word64,
        1 => EncodingMode::Word32,
        other => return Err(StreamError::UnknownMode(other)),
    };
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(StreamError::ReservedHeader);
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = mode.word_bytes();
    let body = &bytes[STREAM_HEADER_LEN..];
    let expected = count.saturating_mul(width);
    if body.len() < expected {
        return Err(StreamError::Truncated {
            expected: STREAM_HEADER_LEN.saturating_add(expected),
            actual: bytes.len(),
        });
    }
    if body.len() > expected {
        return Err(StreamError::TrailingBytes(body.len() - expected));
    }
    let code = body
        .chunks_exact(width)
        .enumerate()
        .map(|(index, chunk)| {
            let mut buf = [0u8; 8];
            buf[..width].copy_from_slice(chunk);
            decode(u64::from_le_bytes(buf), mode).map_err(|source| StreamError::Instruction { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((mode, code))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u8) -> Reg {
        Reg::r(i)
    }

    #[test]
    fn sadd_packs_register_fields_only() {
        let word =
            encode(&Instruction::Sadd { rd: r(3), rs1: r(1), rs2: r(2) }, EncodingMode::Word64).unwrap();
        assert_eq!(word >> 58, Opcode::Sadd.bits() as u64);
        assert_eq!((word >> 53) & 0x1f, 3);
        assert_eq!((word >> 48) & 0x1f, 1);
        assert_eq!((word >> 43) & 0x1f, 2);
        assert_eq!(word & ((1 << 43) - 1), 0);
    }

    #[test]
    fn sld_with_odd_base_is_rejected() {
        let sld = Instruction::Sld { rd: r(0), rs1: r(1), offset: 0 };
        assert_eq!(
            encode(&sld, EncodingMode::Word64),
            Err(IsaError::EvenRegisterRequired { op: "sld", field: "rs1" })
        );
    }

    #[test]
    fn offsets_rejected_in_word32() {
        let v = VecOperands { rd: r(1), rs1: r(2), rs2: r(3), len: 4, offset: Offset::new(0b101, 0) };
        let instr = Instruction::Vvadd(v);
        assert_eq!(encode(&instr, EncodingMode::Word32), Err(IsaError::OffsetUnsupportedIn32BitMode));
        assert!(encode(&instr.without_offset(), EncodingMode::Word32).is_ok());
        assert!(encode(&instr, EncodingMode::Word64).is_ok());
    }

    #[test]
    fn sldi_roundtrip() {
        let i = Instruction::Sldi { rd: r(5), imm: 42 };
        for mode in [EncodingMode::Word64, EncodingMode::Word32] {
            assert_eq!(decode(encode(&i, mode).unwrap(), mode), Ok(i));
        }
        let neg = Instruction::Saddi { rd: r(5), rs1: r(6), imm: -3 };
        assert_eq!(decode(encode(&neg, EncodingMode::Word32).unwrap(), EncodingMode::Word32), Ok(neg));
    }

    #[test]
    fn unassigned_opcode() {
        assert_eq!(decode(0b111111 << 58, EncodingMode::Word64), Err(IsaError::UnknownOpcode(0x3f)));
        assert_eq!(decode(0b111111 << 26, EncodingMode::Word32), Err(IsaError::UnknownOpcode(0x3f)));
    }

    #[test]
    fn reserved_bits_rejected() {
        // sadd carries nothing in its imm area
        let word =
            encode(&Instruction::Sadd { rd: r(1), rs1: r(2), rs2: r(3) }, EncodingMode::Word64).unwrap();
        assert_eq!(
            decode(word | 1, EncodingMode::Word64),
            Err(IsaError::ReservedFieldNonzero { opcode: Opcode::Sadd, field: "imm_lo" })
        );
        let word32 = encode(&Instruction::Wait { ev: 1, val: 2 }, EncodingMode::Word32).unwrap();
        assert!(matches!(
            decode(word32 | (1 << 24), EncodingMode::Word32),
            Err(IsaError::ReservedFieldNonzero { .. })
        ));
    }

    #[test]
    fn validate_examples() {
        let st = Instruction::St(CopyOperands { rd: r(2), rs1: r(4), size: 8, offset: Offset::NONE });
        assert!(validate(&st).is_empty());
        let mv = Instruction::Mvmul { rd: r(1), rs1: r(2), mbiw: 8, relu: 2, group: 0 };
        assert!(matches!(validate(&mv)[..], [IsaError::FieldOverflow { field: "imm_relu", .. }]));
        let wait = Instruction::Wait { ev: 16, val: 1 };
        assert!(matches!(validate(&wait)[..], [IsaError::FieldOverflow { field: "imm_ev", .. }]));
        assert!(validate_with(&wait, &Limits { event_registers: 32 }).is_empty());
        let bw = Instruction::Setbw { ibiw: 0, obiw: 33 };
        assert_eq!(validate(&bw).len(), 2);
    }

    #[test]
    fn word32_field_limits() {
        let big = Instruction::Sldi { rd: r(1), imm: 40_000 };
        assert!(matches!(encode(&big, EncodingMode::Word32), Err(IsaError::FieldOutOfRange { .. })));
        let send = Instruction::Send { rs1: r(2), core: 40, size: 4, offset: 0 };
        assert!(encode(&send, EncodingMode::Word64).is_ok());
        assert!(matches!(
            encode(&send, EncodingMode::Word32),
            Err(IsaError::FieldOverflow { field: "imm_core", .. })
        ));
    }

    #[test]
    fn every_opcode_has_unique_mnemonic() {
        for (i, op) in Opcode::ALL.iter().enumerate() {
            assert_eq!(op.bits() as usize, i);
            assert_eq!(Opcode::from_mnemonic(op.mnemonic()), Some(*op));
            assert_eq!(Opcode::from_bits(op.bits()), Some(*op));
        }
        let mut names: Vec<_> = Opcode::ALL.iter().map(|o| o.mnemonic()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 31);
    }

    #[test]
    fn stream_roundtrip_and_errors() {
        let code = vec![Instruction::Sldi { rd: r(1), imm: -7 }, Instruction::Wait { ev: 0, val: 2 }];
        for mode in [EncodingMode::Word64, EncodingMode::Word32] {
            let bytes = write_stream(&code, mode).unwrap();
            assert_eq!(&bytes[..4], b"PIMI");
            assert_eq!(bytes.len(), 12 + 2 * mode.word_bytes());
            assert_eq!(read_stream(&bytes).unwrap(), (mode, code.clone()));
            assert!(matches!(read_stream(&bytes[..bytes.len() - 1]), Err(StreamError::Truncated { .. })));
        }
        assert_eq!(read_stream(b"NOPE____________"), Err(StreamError::BadMagic));
    }
}
