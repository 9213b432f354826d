//! Reference semantics for differential testing.
//!
//! Everything here is written independently of [`crate::vm`]: arithmetic is
//! done on unbounded integers and reduced only when a value is stored, weight
//! matrices are rebuilt from the tiles, and the scheduler is re-derived from
//! the shadow state. [`diff_run`] steps the simulator and replays each step on
//! shadow state, stopping at the first disagreement.

use std::collections::BTreeSet;

use num_bigint::{BigInt, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::isa::{Instruction, Offset, Reg, Slot, REGISTER_COUNT};
use crate::manifest::{BundleErrors, CoreConfig, Matrix, ProgramBundle, QFormat};
use crate::vm::{Effect, Machine, OverlapMode, StepOutcome, Trap, TrapKind, VmOptions};

/// Architectural state of one core plus the global memory it sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefEnv {
    pub regs: [u32; REGISTER_COUNT],
    pub lmem: Vec<u8>,
    pub gmem: Vec<u8>,
    pub events: Vec<u32>,
    pub ibiw: u8,
    pub obiw: u8,
    /// Weight matrices by group id, row-major.
    pub groups: Vec<Vec<Vec<i64>>>,
    pub qformat: Option<QFormat>,
    pub variable_bitwidth: bool,
    pub strict_overlap: bool,
}

/// What a reference step did besides updating the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefOutcome {
    Done,
    /// `wait` whose event register does not hold the expected value.
    Blocked,
    /// `sync`: the target's event register must be incremented by the caller.
    Sync {
        core: usize,
        ev: u8,
    },
    /// `send`/`recv`: the caller pairs them; no state was changed.
    Send {
        dest: usize,
        size: u16,
    },
    Recv {
        src: usize,
        size: u16,
    },
}

fn byte_width(bits: u8) -> u64 {
    u64::from(bits).div_ceil(8)
}

fn pow2(bits: u32) -> BigInt {
    BigInt::one() << bits
}

/// Two's complement reduction of `v` to `bits` bits.
pub fn wrap_signed(v: &BigInt, bits: u8) -> BigInt {
    let m = pow2(u32::from(bits));
    let mut r = v % &m;
    if r.is_negative() {
        r += &m;
    }
    if r >= (&m >> 1u32) {
        r -= m;
    }
    r
}

pub fn saturate_signed(v: &BigInt, bits: u8) -> BigInt {
    let hi = pow2(u32::from(bits) - 1) - 1;
    let lo = -pow2(u32::from(bits) - 1);
    v.clone().clamp(lo, hi)
}

/// Reads the element of `bytes` bytes at `addr` as a `bits`-bit signed value.
pub fn load_elem(mem: &[u8], addr: u64, bytes: u64, bits: u8) -> BigInt {
    let raw = BigInt::from_bytes_le(Sign::Plus, &mem[addr as usize..(addr + bytes) as usize]);
    wrap_signed(&raw, bits)
}

/// Stores `v` modulo `2^(8 * bytes)` little-endian at `addr`.
pub fn store_elem(mem: &mut [u8], addr: u64, bytes: u64, v: &BigInt) {
    let m = pow2(8 * bytes as u32);
    let mut r = v % &m;
    if r.is_negative() {
        r += &m;
    }
    let (_, le) = r.to_bytes_le();
    for i in 0..bytes {
        mem[(addr + i) as usize] = le.get(i as usize).copied().unwrap_or(0);
    }
}

fn to_i64(v: &BigInt) -> i64 {
    v.to_i64().expect("reduced value fits in i64")
}

type Step = Result<RefOutcome, TrapKind>;

impl RefEnv {
    /// Power-up state of `core` in `bundle`.
    pub fn new(bundle: &ProgramBundle, core: &CoreConfig) -> RefEnv {
        let mut gmem = vec![0; bundle.global_mem_bytes];
        for init in &bundle.global_mem_init {
            for (i, b) in init.bytes.iter().enumerate() {
                gmem[init.address as usize + i] = *b;
            }
        }
        let groups = core
            .groups
            .iter()
            .map(|g| {
                let mut m = vec![vec![0i64; g.total_cols]; g.total_rows];
                for t in &g.tiles {
                    let w = &core.arrays.iter().find(|a| a.array_id == t.array_id).expect("array").weights;
                    for r in 0..w.rows {
                        for c in 0..w.cols {
                            m[t.row_offset + r][t.col_offset + c] = i64::from(w.get(r, c));
                        }
                    }
                }
                m
            })
            .collect();
        RefEnv {
            regs: [0; REGISTER_COUNT],
            lmem: vec![0; core.local_mem_bytes],
            gmem,
            events: vec![0; core.event_register_count],
            ibiw: core.initial_ibiw,
            obiw: core.initial_obiw,
            groups,
            qformat: bundle.activation_qformat,
            variable_bitwidth: bundle.variable_bitwidth_supported,
            strict_overlap: true,
        }
    }

    fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index() as usize]
    }

    fn set(&mut self, r: Reg, v: &BigInt) {
        let m = pow2(32);
        let mut x = v % &m;
        if x.is_negative() {
            x += &m;
        }
        self.regs[r.index() as usize] = x.to_u32().expect("reduced");
    }

    fn local(&self, addr: u128, len: u128) -> Result<u64, TrapKind> {
        if addr + len <= self.lmem.len() as u128 {
            Ok(addr as u64)
        } else {
            Err(TrapKind::OutOfBoundsLocal)
        }
    }

    fn global(&self, pair: Reg, off: u64, len: u64) -> Result<u64, TrapKind> {
        if !pair.index().is_multiple_of(2) {
            return Err(TrapKind::EvenRegisterRequired);
        }
        let base = u128::from(self.reg(pair)) + (u128::from(self.regs[pair.index() as usize + 1]) << 32);
        let start = base + u128::from(off);
        if start + u128::from(len) <= self.gmem.len() as u128 && start <= u128::from(u64::MAX) {
            Ok(start as u64)
        } else {
            Err(TrapKind::OutOfBoundsGlobal)
        }
    }

    fn at(&self, r: Reg, offset: Offset, slot: Slot, unit: u64) -> u128 {
        let base = u128::from(self.reg(r));
        if offset.select & slot_bit(slot) != 0 {
            base + u128::from(unit) * u128::from(offset.value)
        } else {
            base
        }
    }
}

fn slot_bit(slot: Slot) -> u8 {
    match slot {
        Slot::Rd => 0b001,
        Slot::Rs1 => 0b010,
        Slot::Rs2 => 0b100,
    }
}

fn disjoint(a: u64, alen: u64, b: u64, blen: u64) -> bool {
    a + alen <= b || b + blen <= a
}

fn nonzero_len(len: u16) -> Result<u64, TrapKind> {
    if len == 0 {
        Err(TrapKind::LengthMismatch)
    } else {
        Ok(u64::from(len))
    }
}

fn activation(tanh: bool, x: &BigInt, frac_in: u32, frac_out: u32, obiw: u8) -> BigInt {
    let v = to_i64(x) as f64 / 2f64.powi(frac_in as i32);
    let f = if tanh { v.tanh() } else { 1.0 / (1.0 + (-v).exp()) };
    let r = (f * 2f64.powi(frac_out as i32)).round();
    let hi = ((1i64 << (obiw - 1)) - 1) as f64;
    let lo = -(1i64 << (obiw - 1)) as f64;
    BigInt::from(r.clamp(lo, hi) as i64)
}

/// Executes one instruction on `env`.
pub fn ref_step(instr: &Instruction, env: &mut RefEnv) -> Step {
    use Instruction as I;
    if matches!(instr, I::Setbw { .. } | I::Vrsu(_) | I::Vrsl(_)) && !env.variable_bitwidth {
        return Err(TrapKind::InvalidInstructionForHardware);
    }
    let ib = byte_width(env.ibiw);
    let ob = byte_width(env.obiw);
    let (ibiw, obiw) = (env.ibiw, env.obiw);
    let big = |r: u32| BigInt::from(r);
    match *instr {
        I::Sldi { rd, imm } => env.set(rd, &BigInt::from(imm)),
        I::Sld { rd, rs1, offset } => {
            let a = env.global(rs1, u64::from(offset), 4)?;
            let v = BigInt::from_bytes_le(Sign::Plus, &env.gmem[a as usize..a as usize + 4]);
            env.set(rd, &v);
        }
        I::Sadd { rd, rs1, rs2 } => env.set(rd, &(big(env.reg(rs1)) + big(env.reg(rs2)))),
        I::Ssub { rd, rs1, rs2 } => env.set(rd, &(big(env.reg(rs1)) - big(env.reg(rs2)))),
        I::Smul { rd, rs1, rs2 } => env.set(rd, &(big(env.reg(rs1)) * big(env.reg(rs2)))),
        I::Saddi { rd, rs1, imm } => env.set(rd, &(big(env.reg(rs1)) + BigInt::from(imm))),
        I::Smuli { rd, rs1, imm } => env.set(rd, &(big(env.reg(rs1)) * BigInt::from(imm))),
        I::Setbw { ibiw, obiw } => {
            if ibiw == 0 || obiw == 0 || ibiw > 32 || obiw > 32 {
                return Err(TrapKind::InvalidOperand);
            }
            env.ibiw = ibiw;
            env.obiw = obiw;
        }
        I::Mvmul { rd, rs1, relu, group, .. } => {
            let w = env.groups.get(usize::from(group)).ok_or(TrapKind::UnknownGroup)?.clone();
            let rows = w.len() as u64;
            let cols = w.first().map_or(0, Vec::len) as u64;
            let x0 = env.local(u128::from(env.reg(rs1)), u128::from(cols * ib))?;
            let y0 = env.local(u128::from(env.reg(rd)), u128::from(rows * ob))?;
            let x: Vec<BigInt> = (0..cols).map(|j| load_elem(&env.lmem, x0 + j * ib, ib, ibiw)).collect();
            for (i, row) in w.iter().enumerate() {
                let mut acc = BigInt::zero();
                for (wij, xj) in row.iter().zip(&x) {
                    acc += BigInt::from(*wij) * xj;
                }
                if relu == 1 && acc.is_negative() {
                    acc = BigInt::zero();
                }
                store_elem(&mut env.lmem, y0 + i as u64 * ob, ob, &saturate_signed(&acc, obiw));
            }
        }
        I::Vvadd(v) | I::Vsub(v) | I::Vmax(v) | I::Vmul(v) | I::Vvsll(v) | I::Vvsra(v) => {
            let n = nonzero_len(v.len)?;
            let (obits, obytes) = match instr {
                I::Vvadd(_) | I::Vsub(_) | I::Vmax(_) => (ibiw, ib),
                _ => (obiw, ob),
            };
            let a = env.local(env.at(v.rs1, v.offset, Slot::Rs1, ib), u128::from(n * ib))?;
            let b = env.local(env.at(v.rs2, v.offset, Slot::Rs2, ib), u128::from(n * ib))?;
            let d = env.local(env.at(v.rd, v.offset, Slot::Rd, obytes), u128::from(n * obytes))?;
            let xs: Vec<BigInt> = (0..n).map(|i| load_elem(&env.lmem, a + i * ib, ib, ibiw)).collect();
            let ys: Vec<BigInt> = (0..n).map(|i| load_elem(&env.lmem, b + i * ib, ib, ibiw)).collect();
            if matches!(instr, I::Vvsll(_) | I::Vvsra(_)) && ys.iter().any(Signed::is_negative) {
                return Err(TrapKind::NegativeShift);
            }
            for (i, (x, y)) in xs.iter().zip(&ys).enumerate() {
                let shift = || y.to_u32().unwrap_or(u32::MAX).min(63);
                let out = match instr {
                    I::Vvadd(_) => wrap_signed(&(x + y), obits),
                    I::Vsub(_) => wrap_signed(&(x - y), obits),
                    I::Vmax(_) => x.max(y).clone(),
                    I::Vmul(_) => wrap_signed(&(x * y), obits),
                    I::Vvsll(_) => wrap_signed(&(x * pow2(shift())), obits),
                    _ => wrap_signed(&floor_div(x, &pow2(shift())), obits),
                };
                store_elem(&mut env.lmem, d + i as u64 * obytes, obytes, &out);
            }
        }
        I::Vdmul(v) => {
            let n = nonzero_len(v.len)?;
            let a = env.local(env.at(v.rs1, v.offset, Slot::Rs1, ib), u128::from(n * ib))?;
            let b = env.local(env.at(v.rs2, v.offset, Slot::Rs2, ib), u128::from(n * ib))?;
            let d = env.local(u128::from(env.reg(v.rd)), u128::from(ob))?;
            let mut acc = BigInt::zero();
            for i in 0..n {
                acc +=
                    load_elem(&env.lmem, a + i * ib, ib, ibiw) * load_elem(&env.lmem, b + i * ib, ib, ibiw);
            }
            store_elem(&mut env.lmem, d, ob, &wrap_signed(&acc, obiw));
        }
        I::Vavg { rd, rs1, rs2, len, offset } => {
            let n = nonzero_len(len)?;
            let stride = u128::from(env.reg(rs2));
            let start = u128::from(env.reg(rs1)) + u128::from(ib) * u128::from(offset);
            let a = env.local(start, (u128::from(n - 1) * stride + 1) * u128::from(ib))?;
            let d = env.local(u128::from(env.reg(rd)), u128::from(ob))?;
            let mut sum = BigInt::zero();
            for i in 0..u128::from(n) {
                sum += load_elem(&env.lmem, a + (i * stride) as u64 * ib, ib, ibiw);
            }
            // truncation toward zero
            let q = &sum / BigInt::from(n);
            store_elem(&mut env.lmem, d, ob, &wrap_signed(&q, obiw));
        }
        I::Vrelu(u) | I::Vtanh(u) | I::Vsigm(u) => {
            let n = nonzero_len(u.len)?;
            let obytes = if matches!(instr, I::Vrelu(_)) { ib } else { ob };
            let a = env.local(env.at(u.rs1, u.offset, Slot::Rs1, ib), u128::from(n * ib))?;
            let d = env.local(env.at(u.rd, u.offset, Slot::Rd, obytes), u128::from(n * obytes))?;
            let (fin, fout) = match env.qformat {
                Some(q) => (q.frac_in, q.frac_out),
                None => (u32::from(ibiw.max(2) - 2), u32::from(obiw.max(2) - 2)),
            };
            let xs: Vec<BigInt> = (0..n).map(|i| load_elem(&env.lmem, a + i * ib, ib, ibiw)).collect();
            for (i, x) in xs.iter().enumerate() {
                let y = match instr {
                    I::Vrelu(_) => x.max(&BigInt::zero()).clone(),
                    I::Vtanh(_) => activation(true, x, fin, fout, obiw),
                    _ => activation(false, x, fin, fout, obiw),
                };
                store_elem(&mut env.lmem, d + i as u64 * obytes, obytes, &y);
            }
        }
        I::Vmv { rd, rs1, rs2, len } => {
            let n = nonzero_len(len)?;
            let stride = u128::from(env.reg(rs2));
            let a = env.local(u128::from(env.reg(rs1)), (u128::from(n - 1) * stride + 1) * u128::from(ib))?;
            let d = env.local(u128::from(env.reg(rd)), u128::from(n * ib))?;
            let srcs: Vec<u64> = (0..u128::from(n)).map(|i| a + (i * stride) as u64 * ib).collect();
            if env.strict_overlap && srcs.iter().any(|s| !disjoint(*s, ib, d, n * ib)) {
                return Err(TrapKind::OverlapUndefined);
            }
            let data: Vec<u8> =
                srcs.iter().flat_map(|s| env.lmem[*s as usize..(*s + ib) as usize].to_vec()).collect();
            for (i, byte) in data.into_iter().enumerate() {
                env.lmem[d as usize + i] = byte;
            }
        }
        I::Vrsu(v) | I::Vrsl(v) => {
            let n = nonzero_len(v.len)?;
            let a = env.local(env.at(v.rs1, v.offset, Slot::Rs1, ib), u128::from(n * ib))?;
            let d = env.local(env.at(v.rd, v.offset, Slot::Rd, ob), u128::from(n * ob))?;
            let bound = BigInt::from(env.reg(v.rs2) as i32);
            let upper = matches!(instr, I::Vrsu(_));
            let conv = |x: BigInt| {
                let y = if upper { x.min(bound.clone()) } else { x.max(bound.clone()) };
                wrap_signed(&y, obiw)
            };
            let widening = ob > ib && !disjoint(a, n * ib, d, n * ob);
            if widening {
                if env.strict_overlap {
                    return Err(TrapKind::OverlapUndefined);
                }
                let xs: Vec<BigInt> = (0..n).map(|i| load_elem(&env.lmem, a + i * ib, ib, ibiw)).collect();
                for (i, x) in xs.into_iter().enumerate() {
                    store_elem(&mut env.lmem, d + i as u64 * ob, ob, &conv(x));
                }
            } else {
                for i in 0..n {
                    let x = load_elem(&env.lmem, a + i * ib, ib, ibiw);
                    store_elem(&mut env.lmem, d + i * ob, ob, &conv(x));
                }
            }
        }
        I::Ld(c) => {
            let off = if c.offset.select & 0b010 != 0 { u64::from(c.offset.value) } else { 0 };
            let s = env.global(c.rs1, off, u64::from(c.size))?;
            let d = env.local(env.at(c.rd, c.offset, Slot::Rd, 1), u128::from(c.size))?;
            for i in 0..u64::from(c.size) {
                env.lmem[(d + i) as usize] = env.gmem[(s + i) as usize];
            }
        }
        I::St(c) => {
            let s = env.local(env.at(c.rs1, c.offset, Slot::Rs1, 1), u128::from(c.size))?;
            let off = if c.offset.select & 0b001 != 0 { u64::from(c.offset.value) } else { 0 };
            let d = env.global(c.rd, off, u64::from(c.size))?;
            for i in 0..u64::from(c.size) {
                env.gmem[(d + i) as usize] = env.lmem[(s + i) as usize];
            }
        }
        I::Ldi { rd, imm, size, offset } => {
            let d = env.local(u128::from(env.reg(rd)) + u128::from(offset), u128::from(size))?;
            for i in 0..u64::from(size) {
                env.lmem[(d + i) as usize] = imm;
            }
        }
        I::Lmv(c) => {
            let size = u64::from(c.size);
            let s = env.local(env.at(c.rs1, c.offset, Slot::Rs1, 1), u128::from(size))?;
            let d = env.local(env.at(c.rd, c.offset, Slot::Rd, 1), u128::from(size))?;
            if env.strict_overlap && !disjoint(s, size, d, size) {
                return Err(TrapKind::OverlapUndefined);
            }
            let tmp = env.lmem[s as usize..(s + size) as usize].to_vec();
            env.lmem[d as usize..(d + size) as usize].copy_from_slice(&tmp);
        }
        I::Send { core, size, .. } => return Ok(RefOutcome::Send { dest: usize::from(core), size }),
        I::Recv { core, size, .. } => return Ok(RefOutcome::Recv { src: usize::from(core), size }),
        I::Wait { ev, val } => {
            let e = env.events.get_mut(usize::from(ev)).ok_or(TrapKind::InvalidOperand)?;
            if *e != u32::from(val) {
                return Ok(RefOutcome::Blocked);
            }
            *e = 0;
        }
        I::Sync { ev, core } => return Ok(RefOutcome::Sync { core: usize::from(core), ev }),
    }
    Ok(RefOutcome::Done)
}

fn floor_div(x: &BigInt, d: &BigInt) -> BigInt {
    let q = x / d;
    if (x % d).is_zero() || !x.is_negative() {
        q
    } else {
        q - 1
    }
}

/// Pure form of [`ref_step`].
pub fn ref_exec(instr: &Instruction, env: &RefEnv) -> Result<(RefEnv, RefOutcome), TrapKind> {
    let mut next = env.clone();
    let outcome = ref_step(instr, &mut next)?;
    Ok((next, outcome))
}

/// Bytes a `send` transmits.
pub fn ref_send_payload(instr: &Instruction, env: &RefEnv) -> Result<Vec<u8>, TrapKind> {
    let Instruction::Send { rs1, size, offset, .. } = *instr else {
        return Err(TrapKind::InvalidOperand);
    };
    let s = env.local(u128::from(env.reg(rs1)) + u128::from(offset), u128::from(size))?;
    Ok(env.lmem[s as usize..s as usize + usize::from(size)].to_vec())
}

/// Stores the payload of a matched `recv`.
pub fn ref_recv_deliver(instr: &Instruction, env: &mut RefEnv, bytes: &[u8]) -> Result<(), TrapKind> {
    let Instruction::Recv { rd, size, offset, .. } = *instr else {
        return Err(TrapKind::InvalidOperand);
    };
    let d = env.local(u128::from(env.reg(rd)) + u128::from(offset), u128::from(size))?;
    env.lmem[d as usize..d as usize + bytes.len()].copy_from_slice(bytes);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

/// One fully connected layer as the accelerator computes it:
/// `act(wrap_ibiw(sat_obiw(W x) + b))`, with activations reading `ibiw`-bit
/// inputs and producing `obiw`-bit outputs.
pub fn ref_fc_layer(
    w: &Matrix,
    x: &[i64],
    bias: &[i64],
    act: Activation,
    ibiw: u8,
    obiw: u8,
    qformat: Option<QFormat>,
) -> Vec<i64> {
    assert_eq!(w.cols, x.len(), "input length");
    assert_eq!(w.rows, bias.len(), "bias length");
    let (fin, fout) = match qformat {
        Some(q) => (q.frac_in, q.frac_out),
        None => (u32::from(ibiw.max(2) - 2), u32::from(obiw.max(2) - 2)),
    };
    (0..w.rows)
        .map(|i| {
            let acc: BigInt = (0..w.cols).map(|j| BigInt::from(w.get(i, j)) * BigInt::from(x[j])).sum();
            let z = wrap_signed(&(saturate_signed(&acc, obiw) + BigInt::from(bias[i])), ibiw);
            let y = match act {
                Activation::None => z,
                Activation::Relu => z.max(BigInt::zero()),
                Activation::Tanh => activation(true, &z, fin, fout, obiw),
                Activation::Sigmoid => activation(false, &z, fin, fout, obiw),
            };
            to_i64(&y)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DiffOptions {
    pub vm: VmOptions,
    /// Zero means unlimited.
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub step: u64,
    pub core: usize,
    pub pc: usize,
    pub field: String,
    pub expected: String,
    pub actual: String,
}

/// Serialized flat: `{seed, steps, step, core, pc, field, expected, actual,
/// trap}`, the divergence keys present only on disagreement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiffReport {
    pub seed: Option<u64>,
    pub steps: u64,
    #[serde(flatten)]
    pub divergence: Option<Divergence>,
    /// Trap both sides agreed on.
    pub trap: Option<Trap>,
}

impl DiffReport {
    pub fn agrees(&self) -> bool {
        self.divergence.is_none()
    }
}

pub fn diff_run(bundle: &ProgramBundle, options: DiffOptions) -> Result<DiffReport, BundleErrors> {
    diff_run_with(bundle, options, |_| {})
}

/// Like [`diff_run`], with `setup` applied to the simulator after loading.
/// The shadow state starts from the simulator's state after `setup`.
pub fn diff_run_with(
    bundle: &ProgramBundle,
    options: DiffOptions,
    setup: impl FnOnce(&mut Machine),
) -> Result<DiffReport, BundleErrors> {
    let mut vm = Machine::load_with(bundle, options.vm)?;
    setup(&mut vm);
    let mut shadow = Shadow::new(bundle, &vm, options.vm.overlap == OverlapMode::Strict);
    Ok(shadow.replay(&mut vm, options.max_steps))
}

struct Shadow {
    envs: Vec<RefEnv>,
    code: Vec<Vec<Instruction>>,
    pcs: Vec<usize>,
    gmem: Vec<u8>,
    next_start: usize,
}

enum Mismatch {
    At(Divergence),
}

impl Shadow {
    fn new(bundle: &ProgramBundle, vm: &Machine, strict: bool) -> Shadow {
        let mut envs: Vec<RefEnv> = bundle.cores.iter().map(|c| RefEnv::new(bundle, c)).collect();
        let gmem = std::mem::take(&mut envs[0].gmem);
        for env in envs.iter_mut() {
            env.gmem = Vec::new();
        }
        let mut shadow = Shadow {
            envs,
            code: bundle.cores.iter().map(|c| c.code.clone()).collect(),
            pcs: vec![0; bundle.cores.len()],
            gmem,
            next_start: 0,
        };
        for (i, env) in shadow.envs.iter_mut().enumerate() {
            let core = vm.core(i);
            env.strict_overlap = strict;
            env.regs = core.regs;
            env.lmem.clone_from(&core.lmem);
            env.events.clone_from(&core.events);
            env.ibiw = core.bw.ibiw;
            env.obiw = core.bw.obiw;
        }
        shadow.gmem.copy_from_slice(vm.gmem());
        shadow
    }

    fn finished(&self, c: usize) -> bool {
        self.pcs[c] >= self.code[c].len()
    }

    fn current(&self, c: usize) -> Option<Instruction> {
        self.code[c].get(self.pcs[c]).copied()
    }

    /// Whether core `c` would attempt to execute (and possibly trap) rather
    /// than block.
    fn attempts(&self, c: usize) -> bool {
        match self.current(c) {
            None => false,
            Some(Instruction::Wait { ev, val }) => {
                self.envs[c].events.get(usize::from(ev)).is_none_or(|e| *e == u32::from(val))
            }
            Some(Instruction::Send { core, .. }) => {
                let d = usize::from(core);
                d >= self.envs.len()
                    || d == c
                    || matches!(self.current(d), Some(Instruction::Recv { core, .. }) if usize::from(core) == c)
            }
            Some(Instruction::Recv { core, .. }) => {
                let s = usize::from(core);
                s >= self.envs.len()
                    || s == c
                    || matches!(self.current(s), Some(Instruction::Send { core, .. }) if usize::from(core) == c)
            }
            Some(_) => true,
        }
    }

    fn expected_core(&self) -> Option<usize> {
        let n = self.envs.len();
        (0..n).map(|k| (self.next_start + k) % n).find(|&c| self.attempts(c))
    }

    fn div(&self, step: u64, core: usize, field: &str, expected: String, actual: String) -> Mismatch {
        let pc = self.pcs.get(core).copied().unwrap_or(0);
        Mismatch::At(Divergence { step, core, pc, field: field.to_string(), expected, actual })
    }

    /// Runs one shadow instruction on core `c`; for a rendezvous, the peer
    /// instruction too. Returns the cores whose state changed.
    fn execute(&mut self, c: usize) -> Result<Vec<usize>, TrapKind> {
        let instr = self.current(c).expect("not finished");
        self.envs[c].gmem = std::mem::take(&mut self.gmem);
        let result = ref_step(&instr, &mut self.envs[c]);
        self.gmem = std::mem::take(&mut self.envs[c].gmem);
        match result? {
            RefOutcome::Done => {
                self.pcs[c] += 1;
                Ok(vec![c])
            }
            RefOutcome::Blocked => unreachable!("checked by attempts"),
            RefOutcome::Sync { core, ev } => {
                let e = self
                    .envs
                    .get_mut(core)
                    .and_then(|t| t.events.get_mut(usize::from(ev)))
                    .ok_or(TrapKind::InvalidOperand)?;
                *e = e.wrapping_add(1);
                self.pcs[c] += 1;
                Ok(vec![c, core])
            }
            RefOutcome::Send { dest, .. } => self.transfer(c, dest),
            RefOutcome::Recv { src, .. } => self.transfer(src, c),
        }
    }

    fn transfer(&mut self, sender: usize, receiver: usize) -> Result<Vec<usize>, TrapKind> {
        if sender >= self.envs.len() || receiver >= self.envs.len() || sender == receiver {
            return Err(TrapKind::InvalidOperand);
        }
        let send = self.current(sender).expect("sender");
        let recv = self.current(receiver).expect("receiver");
        let (Instruction::Send { size: a, .. }, Instruction::Recv { size: b, .. }) = (send, recv) else {
            unreachable!("checked by attempts")
        };
        if a != b {
            return Err(TrapKind::SizeMismatchSendRecv);
        }
        let payload = ref_send_payload(&send, &self.envs[sender])?;
        ref_recv_deliver(&recv, &mut self.envs[receiver], &payload)?;
        self.pcs[sender] += 1;
        self.pcs[receiver] += 1;
        Ok(vec![sender, receiver])
    }

    fn compare(&self, vm: &Machine, step: u64, touched: &BTreeSet<usize>) -> Result<(), Mismatch> {
        for (c, env) in self.envs.iter().enumerate() {
            let core = vm.core(c);
            if core.pc != self.pcs[c] {
                return Err(self.div(step, c, "pc", self.pcs[c].to_string(), core.pc.to_string()));
            }
            if let Some(r) = (0..REGISTER_COUNT).find(|&r| core.regs[r] != env.regs[r]) {
                return Err(self.div(
                    step,
                    c,
                    &format!("regs[$r{r}]"),
                    format!("{:#010x}", env.regs[r]),
                    format!("{:#010x}", core.regs[r]),
                ));
            }
            if core.events != env.events {
                return Err(self.div(
                    step,
                    c,
                    "events",
                    format!("{:?}", env.events),
                    format!("{:?}", core.events),
                ));
            }
            if (core.bw.ibiw, core.bw.obiw) != (env.ibiw, env.obiw) {
                return Err(self.div(
                    step,
                    c,
                    "bitwidth",
                    format!("{}/{}", env.ibiw, env.obiw),
                    format!("{}/{}", core.bw.ibiw, core.bw.obiw),
                ));
            }
            if touched.contains(&c) {
                if let Some(i) = (0..env.lmem.len()).find(|&i| env.lmem[i] != core.lmem[i]) {
                    return Err(self.div(
                        step,
                        c,
                        &format!("lmem[{i:#x}]"),
                        format!("{:#04x}", env.lmem[i]),
                        format!("{:#04x}", core.lmem[i]),
                    ));
                }
            }
        }
        Ok(())
    }

    fn compare_gmem(
        &self,
        vm: &Machine,
        step: u64,
        core: usize,
        range: Option<(u64, u64)>,
    ) -> Result<(), Mismatch> {
        let (lo, hi) = range.unwrap_or((0, self.gmem.len() as u64));
        let actual = vm.gmem();
        if let Some(i) = (lo as usize..hi as usize).find(|&i| actual[i] != self.gmem[i]) {
            return Err(self.div(
                step,
                core,
                &format!("gmem[{i:#x}]"),
                format!("{:#04x}", self.gmem[i]),
                format!("{:#04x}", actual[i]),
            ));
        }
        Ok(())
    }

    fn replay(&mut self, vm: &mut Machine, max_steps: u64) -> DiffReport {
        let mut steps = 0;
        let result = loop {
            if max_steps != 0 && steps >= max_steps {
                break Ok(None);
            }
            let outcome = vm.step();
            if let Err(m) = self.check_step(vm, &outcome, steps) {
                break Err(m);
            }
            match outcome {
                StepOutcome::Progressed => steps += 1,
                StepOutcome::AllBlockedOrFinished => break Ok(None),
                StepOutcome::Trapped(t) => break Ok(Some(t)),
            }
        };
        let result = result.and_then(|trap| {
            self.compare_gmem(vm, steps, 0, None)?;
            let all: BTreeSet<usize> = (0..self.envs.len()).collect();
            self.compare(vm, steps, &all)?;
            Ok(trap)
        });
        match result {
            Ok(trap) => DiffReport { seed: None, steps, divergence: None, trap },
            Err(Mismatch::At(d)) => DiffReport { seed: None, steps, divergence: Some(d), trap: None },
        }
    }

    fn check_step(&mut self, vm: &Machine, outcome: &StepOutcome, step: u64) -> Result<(), Mismatch> {
        let expected = self.expected_core();
        match outcome {
            StepOutcome::AllBlockedOrFinished => {
                if let Some(c) = (0..self.envs.len()).find(|&c| !self.finished(c)) {
                    return Err(self.div(step, c, "schedule", "progress".into(), "no progress".into()));
                }
                Ok(())
            }
            StepOutcome::Trapped(trap) if trap.kind == TrapKind::Deadlock => match expected {
                Some(c) => Err(self.div(step, c, "trap", format!("core {c} progresses"), trap.to_string())),
                None if (0..self.envs.len()).all(|c| self.finished(c)) => {
                    Err(self.div(step, trap.core, "trap", "all finished".into(), trap.to_string()))
                }
                None => Ok(()),
            },
            StepOutcome::Trapped(trap) if trap.kind == TrapKind::StepLimitExceeded => Ok(()),
            StepOutcome::Trapped(trap) => {
                let Some(c) = expected else {
                    return Err(self.div(step, trap.core, "trap", "Deadlock".into(), trap.to_string()));
                };
                if c != trap.core {
                    return Err(self.div(
                        step,
                        c,
                        "schedule",
                        format!("core {c}"),
                        format!("core {}", trap.core),
                    ));
                }
                match self.execute(c) {
                    Err(kind) if kind == trap.kind => Ok(()),
                    Err(kind) => Err(self.div(step, c, "trap", kind.to_string(), trap.kind.to_string())),
                    Ok(_) => Err(self.div(step, c, "trap", "no trap".into(), trap.to_string())),
                }
            }
            StepOutcome::Progressed => {
                let events = vm.last_events();
                let Some(c) = expected else {
                    return Err(self.div(
                        step,
                        events[0].core,
                        "schedule",
                        "Deadlock".into(),
                        "progress".into(),
                    ));
                };
                if events[0].core != c {
                    return Err(self.div(
                        step,
                        c,
                        "schedule",
                        format!("core {c}"),
                        format!("core {}", events[0].core),
                    ));
                }
                for e in events {
                    let want = self.current(e.core);
                    if e.pc != self.pcs[e.core] || want != Some(e.instr) {
                        return Err(self.div(
                            step,
                            e.core,
                            "instruction",
                            want.map_or("none".into(), |i| i.to_string()),
                            e.instr.to_string(),
                        ));
                    }
                }
                let instr = self.current(c).expect("attempts implies not finished");
                let touched = match self.execute(c) {
                    Ok(t) => t,
                    Err(kind) => return Err(self.div(step, c, "trap", kind.to_string(), "no trap".into())),
                };
                let expected_events =
                    if matches!(instr, Instruction::Send { .. } | Instruction::Recv { .. }) { 2 } else { 1 };
                if events.len() != expected_events {
                    return Err(self.div(
                        step,
                        c,
                        "events",
                        format!("{expected_events} trace events"),
                        format!("{}", events.len()),
                    ));
                }
                self.next_start = (c + 1) % self.envs.len();
                self.compare(vm, step, &touched.into_iter().collect())?;
                if let Instruction::St(_) = instr {
                    let range = events[0].effects.iter().find_map(|e| match *e {
                        Effect::Global { addr, len } => Some((addr, addr + len)),
                        _ => None,
                    });
                    match range {
                        Some(r) => self.compare_gmem(vm, step, c, Some(r))?,
                        None => self.compare_gmem(vm, step, c, None)?,
                    }
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_and_saturate() {
        assert_eq!(wrap_signed(&BigInt::from(128), 8), BigInt::from(-128));
        assert_eq!(wrap_signed(&BigInt::from(-129), 8), BigInt::from(127));
        assert_eq!(wrap_signed(&BigInt::from(5), 3), BigInt::from(-3));
        assert_eq!(saturate_signed(&BigInt::from(1000), 8), BigInt::from(127));
        assert_eq!(saturate_signed(&BigInt::from(-1000), 8), BigInt::from(-128));
    }

    #[test]
    fn element_storage_sign_extends() {
        let mut mem = vec![0u8; 4];
        store_elem(&mut mem, 0, 2, &BigInt::from(-2));
        assert_eq!(mem[..2], [0xfe, 0xff]);
        assert_eq!(load_elem(&mem, 0, 2, 12), BigInt::from(-2));
        mem[1] = 0x08;
        assert_eq!(load_elem(&mem, 0, 2, 12), BigInt::from(0x8fe - 0x1000));
        mem[1] = 0x17;
        // bits above the width are ignored
        assert_eq!(load_elem(&mem, 0, 2, 12), BigInt::from(0x7fe));
    }

    #[test]
    fn floor_division_for_arithmetic_shift() {
        assert_eq!(floor_div(&BigInt::from(-5), &BigInt::from(2)), BigInt::from(-3));
        assert_eq!(floor_div(&BigInt::from(5), &BigInt::from(2)), BigInt::from(2));
        assert_eq!(floor_div(&BigInt::from(-4), &BigInt::from(2)), BigInt::from(-2));
    }

    #[test]
    fn fc_layer_saturates_before_bias() {
        let w = Matrix::from_rows(&[vec![100, 100]]);
        let y = ref_fc_layer(&w, &[1, 1], &[-10], Activation::None, 8, 8, None);
        assert_eq!(y, vec![117]);
        let y = ref_fc_layer(&w, &[-1, -1], &[0], Activation::Relu, 8, 8, None);
        assert_eq!(y, vec![0]);
    }
}
