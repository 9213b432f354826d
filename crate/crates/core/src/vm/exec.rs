//! Semantics of every instruction that does not synchronize with another core.

use std::ops::Range;

use super::{effective_address, BitWidthState, CoreState, Effect, Fault, OverlapMode, TrapKind};
use crate::isa::{CopyOperands, Instruction, Opcode, Reg, Slot, UnaryOperands, VecOperands};
use crate::manifest::{Matrix, QFormat};

pub(super) struct Ctx<'a> {
    pub core: usize,
    pub groups: &'a [Matrix],
    pub qformat: Option<QFormat>,
    pub variable_bitwidth: bool,
    pub overlap: OverlapMode,
    pub fault: Option<Fault>,
}

type Fail = (TrapKind, String);
type Exec = Result<(), Fail>;

fn fail<T>(kind: TrapKind, detail: impl Into<String>) -> Result<T, Fail> {
    Err((kind, detail.into()))
}

/// Reduces `v` modulo `2^bits` into the signed range.
fn wrap(v: i128, bits: u8) -> i64 {
    let shift = 128 - u32::from(bits);
    ((v << shift) >> shift) as i64
}

fn saturate(v: i128, bits: u8) -> i64 {
    let max = (1i128 << (bits - 1)) - 1;
    v.clamp(-max - 1, max) as i64
}

fn read_elem(mem: &[u8], addr: usize, bytes: u8, bits: u8) -> i64 {
    let mut raw = 0u64;
    for i in 0..usize::from(bytes) {
        raw |= u64::from(mem[addr + i]) << (8 * i);
    }
    wrap(i128::from(raw), bits)
}

fn write_elem(mem: &mut [u8], addr: usize, bytes: u8, value: i64) {
    for i in 0..usize::from(bytes) {
        mem[addr + i] = (value >> (8 * i)) as u8;
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

struct Core<'a> {
    state: &'a mut CoreState,
    id: usize,
}

impl Core<'_> {
    fn reg(&self, r: Reg) -> u32 {
        self.state.regs[usize::from(r.index())]
    }

    fn local(&self, addr: u64, len: u64, what: &str) -> Result<Range<usize>, Fail> {
        let size = self.state.lmem.len() as u64;
        match addr.checked_add(len) {
            Some(end) if end <= size => Ok(addr as usize..end as usize),
            _ => fail(
                TrapKind::OutOfBoundsLocal,
                format!("{what} [{addr:#x}, +{len}) outside {size}-byte local memory"),
            ),
        }
    }

    fn pair(&self, r: Reg) -> Result<u64, Fail> {
        if !r.is_even() {
            return fail(TrapKind::EvenRegisterRequired, format!("{r} is not even"));
        }
        let lo = self.reg(r);
        let hi = self.state.regs[usize::from(r.index()) + 1];
        Ok(u64::from(hi) << 32 | u64::from(lo))
    }

    fn set_reg(&mut self, r: Reg, value: u32, fx: &mut Vec<Effect>) {
        self.state.regs[usize::from(r.index())] = value;
        fx.push(Effect::Reg { reg: r.index(), value });
    }

    fn wrote(&self, range: &Range<usize>, fx: &mut Vec<Effect>) {
        fx.push(Effect::Local { core: self.id, addr: range.start as u64, len: range.len() as u64 });
    }
}

fn global(gmem: &[u8], addr: u64, off: u64, len: u64, what: &str) -> Result<Range<usize>, Fail> {
    let size = gmem.len() as u64;
    match addr.checked_add(off).and_then(|a| a.checked_add(len).map(|e| (a, e))) {
        Some((start, end)) if end <= size => Ok(start as usize..end as usize),
        _ => fail(
            TrapKind::OutOfBoundsGlobal,
            format!("{what} at {addr:#x}+{off} of {len} bytes outside {size}-byte global memory"),
        ),
    }
}

pub(super) fn execute(
    state: &mut CoreState,
    instr: &Instruction,
    ctx: &Ctx<'_>,
    gmem: &mut [u8],
    fx: &mut Vec<Effect>,
) -> Exec {
    let mut core = Core { state, id: ctx.core };
    if instr.opcode().needs_variable_bitwidth() && !ctx.variable_bitwidth {
        return fail(
            TrapKind::InvalidInstructionForHardware,
            format!("{} needs variable bit-width hardware", instr.mnemonic()),
        );
    }
    match *instr {
        Instruction::Sldi { rd, imm } => core.set_reg(rd, imm as u32, fx),
        Instruction::Sld { rd, rs1, offset } => {
            let base = core.pair(rs1)?;
            let r = global(gmem, base, u64::from(offset), 4, "sld source")?;
            let value = u32::from_le_bytes(gmem[r].try_into().expect("4 bytes"));
            core.set_reg(rd, value, fx);
        }
        Instruction::Sadd { rd, rs1, rs2 } => {
            let v = core.reg(rs1).wrapping_add(core.reg(rs2));
            core.set_reg(rd, v, fx);
        }
        Instruction::Ssub { rd, rs1, rs2 } => {
            let v = core.reg(rs1).wrapping_sub(core.reg(rs2));
            core.set_reg(rd, v, fx);
        }
        Instruction::Smul { rd, rs1, rs2 } => {
            let v = core.reg(rs1).wrapping_mul(core.reg(rs2));
            core.set_reg(rd, v, fx);
        }
        Instruction::Saddi { rd, rs1, imm } => {
            let v = core.reg(rs1).wrapping_add(imm as u32);
            core.set_reg(rd, v, fx);
        }
        Instruction::Smuli { rd, rs1, imm } => {
            let v = core.reg(rs1).wrapping_mul(imm as u32);
            core.set_reg(rd, v, fx);
        }
        Instruction::Setbw { ibiw, obiw } => {
            if !(1..=32).contains(&ibiw) || !(1..=32).contains(&obiw) {
                return fail(TrapKind::InvalidOperand, format!("bit-widths {ibiw}/{obiw}"));
            }
            core.state.bw = BitWidthState::new(ibiw, obiw);
            fx.push(Effect::BitWidth { ibiw, obiw });
        }
        Instruction::Mvmul { rd, rs1, mbiw: _, relu, group } => {
            mvmul(&mut core, ctx, rd, rs1, relu != 0, group, fx)?
        }
        Instruction::Vvadd(v)
        | Instruction::Vsub(v)
        | Instruction::Vmul(v)
        | Instruction::Vmax(v)
        | Instruction::Vvsll(v)
        | Instruction::Vvsra(v) => elementwise(&mut core, ctx, instr.opcode(), v, fx)?,
        Instruction::Vdmul(v) => vdmul(&mut core, v, fx)?,
        Instruction::Vavg { rd, rs1, rs2, len, offset } => vavg(&mut core, rd, rs1, rs2, len, offset, fx)?,
        Instruction::Vrelu(u) | Instruction::Vtanh(u) | Instruction::Vsigm(u) => {
            unary(&mut core, ctx, instr.opcode(), u, fx)?
        }
        Instruction::Vmv { rd, rs1, rs2, len } => vmv(&mut core, ctx, rd, rs1, rs2, len, fx)?,
        Instruction::Vrsu(v) | Instruction::Vrsl(v) => resize(&mut core, ctx, instr.opcode(), v, fx)?,
        Instruction::Ld(c) => {
            let src = core.pair(c.rs1)?;
            let src_off = if c.offset.applies_to(Slot::Rs1) { c.offset.value } else { 0 };
            let s = global(gmem, src, u64::from(src_off), u64::from(c.size), "ld source")?;
            let dst = effective_address(core.reg(c.rd), c.offset, Slot::Rd, 1);
            let d = core.local(dst, u64::from(c.size), "ld destination")?;
            core.state.lmem[d.clone()].copy_from_slice(&gmem[s]);
            core.wrote(&d, fx);
        }
        Instruction::St(c) => {
            let src = effective_address(core.reg(c.rs1), c.offset, Slot::Rs1, 1);
            let s = core.local(src, u64::from(c.size), "st source")?;
            let dst = core.pair(c.rd)?;
            let dst_off = if c.offset.applies_to(Slot::Rd) { c.offset.value } else { 0 };
            let d = global(gmem, dst, u64::from(dst_off), u64::from(c.size), "st destination")?;
            gmem[d.clone()].copy_from_slice(&core.state.lmem[s]);
            fx.push(Effect::Global { addr: d.start as u64, len: d.len() as u64 });
        }
        Instruction::Ldi { rd, imm, size, offset } => {
            let dst = u64::from(core.reg(rd)) + u64::from(offset);
            let d = core.local(dst, u64::from(size), "ldi destination")?;
            core.state.lmem[d.clone()].fill(imm);
            core.wrote(&d, fx);
        }
        Instruction::Lmv(c) => lmv(&mut core, ctx, c, fx)?,
        Instruction::Send { .. }
        | Instruction::Recv { .. }
        | Instruction::Wait { .. }
        | Instruction::Sync { .. } => unreachable!("handled by the scheduler"),
    }
    Ok(())
}

fn mvmul(
    core: &mut Core<'_>,
    ctx: &Ctx<'_>,
    rd: Reg,
    rs1: Reg,
    relu: bool,
    group: u16,
    fx: &mut Vec<Effect>,
) -> Exec {
    let Some(m) = ctx.groups.get(usize::from(group)) else {
        return fail(TrapKind::UnknownGroup, format!("array group {group} is not configured"));
    };
    let bw = core.state.bw;
    let src = u64::from(core.reg(rs1));
    let s = core.local(src, m.cols as u64 * u64::from(bw.ibyw), "mvmul input")?;
    let dst = u64::from(core.reg(rd));
    let d = core.local(dst, m.rows as u64 * u64::from(bw.obyw), "mvmul output")?;
    let x: Vec<i128> = (0..m.cols)
        .map(|j| {
            i128::from(read_elem(&core.state.lmem, s.start + j * usize::from(bw.ibyw), bw.ibyw, bw.ibiw))
        })
        .collect();
    for i in 0..m.rows {
        let mut acc: i128 = m.row(i).iter().zip(&x).map(|(w, x)| i128::from(*w) * x).sum();
        if relu {
            acc = acc.max(0);
        }
        let y = saturate(acc, bw.obiw);
        write_elem(&mut core.state.lmem, d.start + i * usize::from(bw.obyw), bw.obyw, y);
    }
    core.wrote(&d, fx);
    Ok(())
}

fn check_len(len: u16, op: Opcode) -> Result<u64, Fail> {
    if len == 0 {
        return fail(TrapKind::LengthMismatch, format!("{} with zero length", op.mnemonic()));
    }
    Ok(u64::from(len))
}

fn elementwise(core: &mut Core<'_>, ctx: &Ctx<'_>, op: Opcode, v: VecOperands, fx: &mut Vec<Effect>) -> Exec {
    let len = check_len(v.len, op)?;
    let bw = core.state.bw;
    let (out_bits, out_bytes) = match op {
        Opcode::Vvadd | Opcode::Vsub | Opcode::Vmax => (bw.ibiw, bw.ibyw),
        _ => (bw.obiw, bw.obyw),
    };
    let ib = u32::from(bw.ibyw);
    let a =
        core.local(effective_address(core.reg(v.rs1), v.offset, Slot::Rs1, ib), len * u64::from(ib), "rs1")?;
    let b =
        core.local(effective_address(core.reg(v.rs2), v.offset, Slot::Rs2, ib), len * u64::from(ib), "rs2")?;
    let d = core.local(
        effective_address(core.reg(v.rd), v.offset, Slot::Rd, u32::from(out_bytes)),
        len * u64::from(out_bytes),
        "rd",
    )?;
    let read = |r: &Range<usize>, i: usize| {
        i128::from(read_elem(&core.state.lmem, r.start + i * usize::from(bw.ibyw), bw.ibyw, bw.ibiw))
    };
    let n = v.len as usize;
    let xs: Vec<i128> = (0..n).map(|i| read(&a, i)).collect();
    let ys: Vec<i128> = (0..n).map(|i| read(&b, i)).collect();
    if matches!(op, Opcode::Vvsll | Opcode::Vvsra) {
        if let Some(i) = ys.iter().position(|s| *s < 0) {
            return fail(TrapKind::NegativeShift, format!("shift count {} at element {i}", ys[i]));
        }
    }
    let bump = i128::from(ctx.fault == Some(Fault::VvaddOffByOne));
    for (i, (x, y)) in xs.into_iter().zip(ys).enumerate() {
        let out = match op {
            Opcode::Vvadd => wrap(x + y + bump, out_bits),
            Opcode::Vsub => wrap(x - y, out_bits),
            Opcode::Vmax => x.max(y) as i64,
            Opcode::Vmul => wrap(x * y, out_bits),
            Opcode::Vvsll => wrap(x << y.min(63), out_bits),
            Opcode::Vvsra => wrap(x >> y.min(63), out_bits),
            _ => unreachable!(),
        };
        write_elem(&mut core.state.lmem, d.start + i * usize::from(out_bytes), out_bytes, out);
    }
    core.wrote(&d, fx);
    Ok(())
}

fn vdmul(core: &mut Core<'_>, v: VecOperands, fx: &mut Vec<Effect>) -> Exec {
    let len = check_len(v.len, Opcode::Vdmul)?;
    let bw = core.state.bw;
    let ib = u32::from(bw.ibyw);
    let a =
        core.local(effective_address(core.reg(v.rs1), v.offset, Slot::Rs1, ib), len * u64::from(ib), "rs1")?;
    let b =
        core.local(effective_address(core.reg(v.rs2), v.offset, Slot::Rs2, ib), len * u64::from(ib), "rs2")?;
    let d = core.local(u64::from(core.reg(v.rd)), u64::from(bw.obyw), "rd")?;
    let mem = &core.state.lmem;
    let step = usize::from(bw.ibyw);
    let acc: i128 = (0..v.len as usize)
        .map(|i| {
            i128::from(read_elem(mem, a.start + i * step, bw.ibyw, bw.ibiw))
                * i128::from(read_elem(mem, b.start + i * step, bw.ibyw, bw.ibiw))
        })
        .sum();
    write_elem(&mut core.state.lmem, d.start, bw.obyw, wrap(acc, bw.obiw));
    core.wrote(&d, fx);
    Ok(())
}

fn vavg(
    core: &mut Core<'_>,
    rd: Reg,
    rs1: Reg,
    rs2: Reg,
    len: u16,
    offset: u16,
    fx: &mut Vec<Effect>,
) -> Exec {
    let n = check_len(len, Opcode::Vavg)?;
    let bw = core.state.bw;
    let ib = u64::from(bw.ibyw);
    let start = u64::from(core.reg(rs1)) + ib * u64::from(offset);
    let stride = u64::from(core.reg(rs2));
    let span = ((n - 1) * stride + 1) * ib;
    let a = core.local(start, span, "rs1")?;
    let d = core.local(u64::from(core.reg(rd)), u64::from(bw.obyw), "rd")?;
    let sum: i128 = (0..n)
        .map(|i| {
            let at = a.start + (i * stride * ib) as usize;
            i128::from(read_elem(&core.state.lmem, at, bw.ibyw, bw.ibiw))
        })
        .sum();
    write_elem(&mut core.state.lmem, d.start, bw.obyw, wrap(sum / i128::from(n), bw.obiw));
    core.wrote(&d, fx);
    Ok(())
}

fn activation(op: Opcode, x: i64, bw: BitWidthState, q: QFormat) -> i64 {
    let v = x as f64 / 2f64.powi(q.frac_in as i32);
    let f = match op {
        Opcode::Vtanh => v.tanh(),
        _ => 1.0 / (1.0 + (-v).exp()),
    };
    let scaled = (f * 2f64.powi(q.frac_out as i32)).round();
    let max = ((1i64 << (bw.obiw - 1)) - 1) as f64;
    scaled.clamp(-max - 1.0, max) as i64
}

fn unary(core: &mut Core<'_>, ctx: &Ctx<'_>, op: Opcode, u: UnaryOperands, fx: &mut Vec<Effect>) -> Exec {
    let len = check_len(u.len, op)?;
    let bw = core.state.bw;
    // vrelu keeps the input width
    let out_bytes = if op == Opcode::Vrelu { bw.ibyw } else { bw.obyw };
    let ib = u32::from(bw.ibyw);
    let a =
        core.local(effective_address(core.reg(u.rs1), u.offset, Slot::Rs1, ib), len * u64::from(ib), "rs1")?;
    let d = core.local(
        effective_address(core.reg(u.rd), u.offset, Slot::Rd, u32::from(out_bytes)),
        len * u64::from(out_bytes),
        "rd",
    )?;
    let q = QFormat::resolve(ctx.qformat, bw.ibiw, bw.obiw);
    let xs: Vec<i64> = (0..usize::from(u.len))
        .map(|i| read_elem(&core.state.lmem, a.start + i * usize::from(bw.ibyw), bw.ibyw, bw.ibiw))
        .collect();
    for (i, x) in xs.into_iter().enumerate() {
        let y = match op {
            Opcode::Vrelu => x.max(0),
            _ => activation(op, x, bw, q),
        };
        write_elem(&mut core.state.lmem, d.start + i * usize::from(out_bytes), out_bytes, y);
    }
    core.wrote(&d, fx);
    Ok(())
}

fn vmv(
    core: &mut Core<'_>,
    ctx: &Ctx<'_>,
    rd: Reg,
    rs1: Reg,
    rs2: Reg,
    len: u16,
    fx: &mut Vec<Effect>,
) -> Exec {
    let n = check_len(len, Opcode::Vmv)?;
    let bw = core.state.bw;
    let ib = u64::from(bw.ibyw);
    let stride = u64::from(core.reg(rs2));
    let a = core.local(u64::from(core.reg(rs1)), ((n - 1) * stride + 1) * ib, "rs1")?;
    let d = core.local(u64::from(core.reg(rd)), n * ib, "rd")?;
    let sources: Vec<Range<usize>> = (0..n)
        .map(|i| {
            let at = a.start + (i * stride * ib) as usize;
            at..at + ib as usize
        })
        .collect();
    if sources.iter().any(|s| overlaps(s, &d)) && ctx.overlap == OverlapMode::Strict {
        return fail(TrapKind::OverlapUndefined, "vmv source and destination overlap");
    }
    let data: Vec<u8> = sources.iter().flat_map(|s| core.state.lmem[s.clone()].to_vec()).collect();
    core.state.lmem[d.clone()].copy_from_slice(&data);
    core.wrote(&d, fx);
    Ok(())
}

/// `vrsu`/`vrsl`: clamps each element to the bound in `$rs2` (read as i32) and
/// converts it to the output width. Elements are processed in ascending
/// order, which makes in-place narrowing well defined.
fn resize(core: &mut Core<'_>, ctx: &Ctx<'_>, op: Opcode, v: VecOperands, fx: &mut Vec<Effect>) -> Exec {
    let len = check_len(v.len, op)?;
    let bw = core.state.bw;
    let ib = u32::from(bw.ibyw);
    let a =
        core.local(effective_address(core.reg(v.rs1), v.offset, Slot::Rs1, ib), len * u64::from(ib), "rs1")?;
    let d = core.local(
        effective_address(core.reg(v.rd), v.offset, Slot::Rd, u32::from(bw.obyw)),
        len * u64::from(bw.obyw),
        "rd",
    )?;
    let bound = i64::from(core.reg(v.rs2) as i32);
    let clamp = |x: i64| {
        let y = if op == Opcode::Vrsu { x.min(bound) } else { x.max(bound) };
        wrap(i128::from(y), bw.obiw)
    };
    let n = usize::from(v.len);
    let widening = overlaps(&a, &d) && bw.obyw > bw.ibyw;
    if widening {
        if ctx.overlap == OverlapMode::Strict {
            return fail(TrapKind::OverlapUndefined, format!("in-place widening {}", op.mnemonic()));
        }
        let xs: Vec<i64> = (0..n)
            .map(|i| read_elem(&core.state.lmem, a.start + i * usize::from(bw.ibyw), bw.ibyw, bw.ibiw))
            .collect();
        for (i, x) in xs.into_iter().enumerate() {
            write_elem(&mut core.state.lmem, d.start + i * usize::from(bw.obyw), bw.obyw, clamp(x));
        }
    } else {
        for i in 0..n {
            let x = read_elem(&core.state.lmem, a.start + i * usize::from(bw.ibyw), bw.ibyw, bw.ibiw);
            write_elem(&mut core.state.lmem, d.start + i * usize::from(bw.obyw), bw.obyw, clamp(x));
        }
    }
    core.wrote(&d, fx);
    Ok(())
}

fn lmv(core: &mut Core<'_>, ctx: &Ctx<'_>, c: CopyOperands, fx: &mut Vec<Effect>) -> Exec {
    let size = u64::from(c.size);
    let s = core.local(effective_address(core.reg(c.rs1), c.offset, Slot::Rs1, 1), size, "lmv source")?;
    let d = core.local(effective_address(core.reg(c.rd), c.offset, Slot::Rd, 1), size, "lmv destination")?;
    if overlaps(&s, &d) && ctx.overlap == OverlapMode::Strict {
        return fail(TrapKind::OverlapUndefined, "lmv source and destination overlap");
    }
    core.state.lmem.copy_within(s, d.start);
    core.wrote(&d, fx);
    Ok(())
}
