//! Seeded generators for instructions, single-instruction machine states and
//! whole multi-core programs. All generators are deterministic in the seed.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asm::{Section, SourceProgram};
use crate::isa::{
    self, CopyOperands, EncodingMode, Instruction, Offset, Opcode, Reg, UnaryOperands, VecOperands,
    DEFAULT_EVENT_REGISTERS,
};
use crate::manifest::{CoreConfig, Matrix, MemInit, ProgramBundle};
use crate::vm::Machine;

pub type FuzzRng = ChaCha8Rng;

pub const SEED_ENV: &str = "PIMKIT_SEED";

pub fn rng(seed: u64) -> FuzzRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The seed in `PIMKIT_SEED`, or `default` when unset or unparsable.
pub fn seed_from_env(default: u64) -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| crate::asm::parse_int(s.trim())).map_or(default, |v| v as u64)
}

fn reg(rng: &mut FuzzRng) -> Reg {
    Reg::r(rng.random_range(0..32))
}

fn even_reg(rng: &mut FuzzRng) -> Reg {
    Reg::r(2 * rng.random_range(0..16))
}

fn width(rng: &mut FuzzRng) -> u8 {
    *[1, 4, 7, 8, 8, 10, 12, 16, 16, 24, 31, 32].choose(rng).expect("nonempty")
}

/// A field value biased towards the edges of `0..=max`.
fn field(rng: &mut FuzzRng, max: u64) -> u64 {
    match rng.random_range(0..8) {
        0 => 0,
        1 => max,
        2 => rng.random_range(0..=max.min(16)),
        _ => rng.random_range(0..=max),
    }
}

/// Any instruction that passes validation and encodes in `mode`.
pub fn random_instruction(rng: &mut FuzzRng, mode: EncodingMode) -> Instruction {
    let op = *Opcode::ALL.choose(rng).expect("nonempty");
    instruction_for(rng, op, mode)
}

pub fn instruction_for(rng: &mut FuzzRng, op: Opcode, mode: EncodingMode) -> Instruction {
    let wide = mode == EncodingMode::Word64;
    let len_max = if wide { u64::from(u16::MAX) } else { 0x7ff };
    let off = |rng: &mut FuzzRng| if wide { field(rng, u64::from(u16::MAX)) as u16 } else { 0 };
    let offset = |rng: &mut FuzzRng| {
        if wide && rng.random_bool(0.5) {
            Offset::new(rng.random_range(0..8), field(rng, u64::from(u16::MAX)) as u16)
        } else {
            Offset::NONE
        }
    };
    let imm = |rng: &mut FuzzRng| {
        if wide {
            match rng.random_range(0..4) {
                0 => i32::MIN,
                1 => i32::MAX,
                _ => rng.random(),
            }
        } else {
            i32::from(rng.random::<i16>())
        }
    };
    let vec = |rng: &mut FuzzRng| VecOperands {
        rd: reg(rng),
        rs1: reg(rng),
        rs2: reg(rng),
        len: field(rng, len_max) as u16,
        offset: offset(rng),
    };
    let unary = |rng: &mut FuzzRng| UnaryOperands {
        rd: reg(rng),
        rs1: reg(rng),
        len: field(rng, len_max) as u16,
        offset: offset(rng),
    };
    let copy = |rng: &mut FuzzRng, rd: Reg, rs1: Reg| CopyOperands {
        rd,
        rs1,
        size: field(rng, len_max) as u16,
        offset: offset(rng),
    };
    let core_max = if wide { 0xff } else { 0x1f };
    let ev = |rng: &mut FuzzRng| rng.random_range(0..DEFAULT_EVENT_REGISTERS as u8);
    let instr = match op {
        Opcode::Sldi => Instruction::Sldi { rd: reg(rng), imm: imm(rng) },
        Opcode::Sld => Instruction::Sld { rd: reg(rng), rs1: even_reg(rng), offset: off(rng) },
        Opcode::Sadd => Instruction::Sadd { rd: reg(rng), rs1: reg(rng), rs2: reg(rng) },
        Opcode::Ssub => Instruction::Ssub { rd: reg(rng), rs1: reg(rng), rs2: reg(rng) },
        Opcode::Smul => Instruction::Smul { rd: reg(rng), rs1: reg(rng), rs2: reg(rng) },
        Opcode::Saddi => Instruction::Saddi { rd: reg(rng), rs1: reg(rng), imm: imm(rng) },
        Opcode::Smuli => Instruction::Smuli { rd: reg(rng), rs1: reg(rng), imm: imm(rng) },
        Opcode::Setbw => Instruction::Setbw { ibiw: width(rng), obiw: width(rng) },
        Opcode::Mvmul => Instruction::Mvmul {
            rd: reg(rng),
            rs1: reg(rng),
            mbiw: width(rng),
            relu: rng.random_range(0..2),
            group: field(rng, if wide { u64::from(u16::MAX) } else { 0x1ff }) as u16,
        },
        Opcode::Vvadd => Instruction::Vvadd(vec(rng)),
        Opcode::Vsub => Instruction::Vsub(vec(rng)),
        Opcode::Vmul => Instruction::Vmul(vec(rng)),
        Opcode::Vdmul => Instruction::Vdmul(vec(rng)),
        Opcode::Vmax => Instruction::Vmax(vec(rng)),
        Opcode::Vvsll => Instruction::Vvsll(vec(rng)),
        Opcode::Vvsra => Instruction::Vvsra(vec(rng)),
        Opcode::Vavg => Instruction::Vavg {
            rd: reg(rng),
            rs1: reg(rng),
            rs2: reg(rng),
            len: field(rng, len_max) as u16,
            offset: off(rng),
        },
        Opcode::Vrelu => Instruction::Vrelu(unary(rng)),
        Opcode::Vtanh => Instruction::Vtanh(unary(rng)),
        Opcode::Vsigm => Instruction::Vsigm(unary(rng)),
        Opcode::Vmv => {
            Instruction::Vmv { rd: reg(rng), rs1: reg(rng), rs2: reg(rng), len: field(rng, len_max) as u16 }
        }
        Opcode::Vrsu => Instruction::Vrsu(vec(rng)),
        Opcode::Vrsl => Instruction::Vrsl(vec(rng)),
        Opcode::Ld => {
            let (rd, rs1) = (reg(rng), even_reg(rng));
            Instruction::Ld(copy(rng, rd, rs1))
        }
        Opcode::St => {
            let (rd, rs1) = (even_reg(rng), reg(rng));
            Instruction::St(copy(rng, rd, rs1))
        }
        Opcode::Ldi => Instruction::Ldi {
            rd: reg(rng),
            imm: rng.random(),
            size: field(rng, len_max) as u16,
            offset: off(rng),
        },
        Opcode::Lmv => {
            let (rd, rs1) = (reg(rng), reg(rng));
            Instruction::Lmv(copy(rng, rd, rs1))
        }
        Opcode::Send => Instruction::Send {
            rs1: reg(rng),
            core: field(rng, core_max) as u16,
            size: field(rng, len_max) as u16,
            offset: off(rng),
        },
        Opcode::Recv => Instruction::Recv {
            rd: reg(rng),
            core: field(rng, core_max) as u16,
            size: field(rng, len_max) as u16,
            offset: off(rng),
        },
        Opcode::Wait => Instruction::Wait { ev: ev(rng), val: rng.random() },
        Opcode::Sync => Instruction::Sync { ev: ev(rng), core: rng.random() },
    };
    debug_assert!(isa::validate(&instr).is_empty(), "{instr}");
    instr
}

/// Multi-section program of random valid instructions.
pub fn random_source(rng: &mut FuzzRng, mode: EncodingMode, max_len: usize) -> SourceProgram {
    let sections = rng.random_range(1..=3);
    let mut ids: Vec<u32> = (0..8).collect();
    ids.sort_by_key(|_| rng.random::<u32>());
    let mut chosen: Vec<u32> = ids[..sections].to_vec();
    chosen.sort_unstable();
    SourceProgram {
        sections: chosen
            .into_iter()
            .map(|id| {
                let n = rng.random_range(0..=max_len);
                Section::new(id, (0..n).map(|_| random_instruction(rng, mode)).collect())
            })
            .collect(),
    }
}

/// A machine state around a single instruction under test, plus the state
/// to install after loading.
#[derive(Debug, Clone)]
pub struct OpCase {
    pub bundle: ProgramBundle,
    pub regs: Vec<[u32; 32]>,
    pub lmem: Vec<Vec<u8>>,
    pub events: Vec<Vec<u32>>,
    pub widths: Vec<(u8, u8)>,
}

impl OpCase {
    pub fn apply(&self, machine: &mut Machine) {
        for (i, regs) in self.regs.iter().enumerate() {
            let core = machine.core_mut(i);
            core.regs = *regs;
            core.lmem.clone_from(&self.lmem[i]);
            core.events.clone_from(&self.events[i]);
            core.bw = crate::vm::BitWidthState::new(self.widths[i].0, self.widths[i].1);
        }
    }

    pub fn instruction(&self) -> Instruction {
        self.bundle.cores[0].code[0]
    }
}

const CASE_LMEM: usize = 512;
const CASE_GMEM: usize = 512;

fn case_bytes(rng: &mut FuzzRng, len: usize, small: bool) -> Vec<u8> {
    let style = rng.random_range(0..4);
    (0..len)
        .map(|_| match style {
            _ if small => {
                if rng.random_bool(0.9) {
                    rng.random_range(0..40)
                } else {
                    rng.random()
                }
            }
            0 => *[0x00, 0x7f, 0x80, 0xff, 0x01].choose(rng).expect("nonempty"),
            1 => rng.random_range(0..16),
            _ => rng.random(),
        })
        .collect()
}

/// A register value: usually an address inside local memory, sometimes
/// arbitrary.
fn case_addr(rng: &mut FuzzRng) -> u32 {
    match rng.random_range(0..20) {
        0 => rng.random(),
        1 => CASE_LMEM as u32 - rng.random_range(0..8),
        _ => rng.random_range(0..CASE_LMEM as u32 / 4),
    }
}

fn case_weights(rng: &mut FuzzRng, rows: usize, cols: usize) -> Matrix {
    let style = rng.random_range(0..4);
    let data = (0..rows * cols)
        .map(|_| match style {
            0 => *[i32::from(i8::MAX), i32::from(i8::MIN), 1, -1].choose(rng).expect("nonempty"),
            1 => rng.random(),
            _ => i32::from(rng.random::<i8>()),
        })
        .collect();
    Matrix { rows, cols, data }
}

/// A one-instruction case for `op`. Communication opcodes get a second core
/// holding the counterpart.
pub fn op_case(rng: &mut FuzzRng, op: Opcode) -> OpCase {
    let comm = matches!(op, Opcode::Send | Opcode::Recv | Opcode::Sync);
    let ncores = if comm { 2 } else { 1 };
    let mut bundle = ProgramBundle {
        global_mem_bytes: CASE_GMEM,
        // bundles using these opcodes on fixed-width hardware are rejected at load
        variable_bitwidth_supported: op.needs_variable_bitwidth() || rng.random_bool(0.9),
        ..ProgramBundle::default()
    };
    if rng.random_bool(0.3) {
        bundle.activation_qformat = Some(crate::manifest::QFormat {
            frac_in: rng.random_range(0..12),
            frac_out: rng.random_range(0..12),
        });
    }
    bundle.global_mem_init.push(MemInit { address: 0, bytes: case_bytes(rng, CASE_GMEM, false) });

    let small_data = matches!(op, Opcode::Vvsll | Opcode::Vvsra) && rng.random_bool(0.75);
    let mut regs = Vec::new();
    let mut lmem = Vec::new();
    let mut events: Vec<Vec<u32>> = Vec::new();
    let mut widths = Vec::new();
    for _ in 0..ncores {
        let mut r = [0u32; 32];
        for v in r.iter_mut() {
            *v = case_addr(rng);
        }
        // global address pairs: the high half is usually zero
        for pair in (0..32).step_by(2) {
            r[pair] = match rng.random_range(0..10) {
                0 => rng.random(),
                _ => rng.random_range(0..CASE_GMEM as u32),
            };
            r[pair + 1] = if rng.random_bool(0.9) { 0 } else { rng.random_range(0..3) };
        }
        // strides and bounds
        for v in r[24..28].iter_mut() {
            *v = match rng.random_range(0..6) {
                0 => 0,
                1 => rng.random(),
                _ => rng.random_range(1..4),
            };
        }
        regs.push(r);
        lmem.push(case_bytes(rng, CASE_LMEM, small_data));
        events.push(
            (0..DEFAULT_EVENT_REGISTERS)
                .map(|_| if rng.random_bool(0.9) { rng.random_range(0..3) } else { rng.random() })
                .collect(),
        );
        widths.push((width(rng), width(rng)));
    }

    let mut core0 = CoreConfig::new(0, Vec::new());
    core0.local_mem_bytes = CASE_LMEM;
    if op == Opcode::Mvmul {
        for _ in 0..rng.random_range(1..=2) {
            let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
            core0.add_matrix_group(case_weights(rng, rows, cols));
        }
    }

    let addr_reg = |rng: &mut FuzzRng| Reg::r(rng.random_range(0..24));
    let stride_reg = |rng: &mut FuzzRng| Reg::r(rng.random_range(24..28));
    let len = |rng: &mut FuzzRng| match rng.random_range(0..40) {
        0 => 0,
        1 => rng.random_range(0..=u16::MAX),
        _ => rng.random_range(1..=24),
    };
    let offset = |rng: &mut FuzzRng| {
        if rng.random_bool(0.4) {
            Offset::new(rng.random_range(0..8), rng.random_range(0..12))
        } else {
            Offset::NONE
        }
    };
    let vec = |rng: &mut FuzzRng| VecOperands {
        rd: addr_reg(rng),
        rs1: addr_reg(rng),
        rs2: addr_reg(rng),
        len: len(rng),
        offset: offset(rng),
    };
    let unary = |rng: &mut FuzzRng| UnaryOperands {
        rd: addr_reg(rng),
        rs1: addr_reg(rng),
        len: len(rng),
        offset: offset(rng),
    };
    let size = |rng: &mut FuzzRng| match rng.random_range(0..30) {
        0 => 0,
        1 => rng.random_range(0..=0x7ff),
        _ => rng.random_range(1..=64),
    };
    let pair_reg = |rng: &mut FuzzRng| Reg::r(2 * rng.random_range(0..16));
    let group_count = core0.groups.len() as u16;

    let mut peer: Option<Instruction> = None;
    let instr = match op {
        Opcode::Vvadd => Instruction::Vvadd(vec(rng)),
        Opcode::Vsub => Instruction::Vsub(vec(rng)),
        Opcode::Vmul => Instruction::Vmul(vec(rng)),
        Opcode::Vdmul => Instruction::Vdmul(vec(rng)),
        Opcode::Vmax => Instruction::Vmax(vec(rng)),
        Opcode::Vvsll => Instruction::Vvsll(vec(rng)),
        Opcode::Vvsra => Instruction::Vvsra(vec(rng)),
        Opcode::Vrsu => Instruction::Vrsu(VecOperands { rs2: reg(rng), ..vec(rng) }),
        Opcode::Vrsl => Instruction::Vrsl(VecOperands { rs2: reg(rng), ..vec(rng) }),
        Opcode::Vrelu => Instruction::Vrelu(unary(rng)),
        Opcode::Vtanh => Instruction::Vtanh(unary(rng)),
        Opcode::Vsigm => Instruction::Vsigm(unary(rng)),
        Opcode::Vavg => Instruction::Vavg {
            rd: addr_reg(rng),
            rs1: addr_reg(rng),
            rs2: stride_reg(rng),
            len: len(rng),
            offset: rng.random_range(0..12),
        },
        Opcode::Vmv => {
            Instruction::Vmv { rd: addr_reg(rng), rs1: addr_reg(rng), rs2: stride_reg(rng), len: len(rng) }
        }
        Opcode::Mvmul => {
            let group = rng.random_range(0..group_count);
            let widest = core0.arrays[usize::from(group)]
                .weights
                .data
                .iter()
                .map(|w| 33 - (if *w < 0 { !*w } else { *w }).leading_zeros())
                .max()
                .unwrap_or(1);
            Instruction::Mvmul {
                rd: addr_reg(rng),
                rs1: addr_reg(rng),
                mbiw: rng.random_range(widest as u8..=32),
                relu: rng.random_range(0..2),
                group,
            }
        }
        Opcode::Ld => Instruction::Ld(CopyOperands {
            rd: addr_reg(rng),
            rs1: pair_reg(rng),
            size: size(rng),
            offset: offset(rng),
        }),
        Opcode::St => Instruction::St(CopyOperands {
            rd: pair_reg(rng),
            rs1: addr_reg(rng),
            size: size(rng),
            offset: offset(rng),
        }),
        Opcode::Lmv => Instruction::Lmv(CopyOperands {
            rd: addr_reg(rng),
            rs1: addr_reg(rng),
            size: size(rng),
            offset: offset(rng),
        }),
        Opcode::Ldi => Instruction::Ldi {
            rd: addr_reg(rng),
            imm: rng.random(),
            size: size(rng),
            offset: rng.random_range(0..16),
        },
        Opcode::Sld => Instruction::Sld { rd: reg(rng), rs1: pair_reg(rng), offset: rng.random_range(0..64) },
        Opcode::Send | Opcode::Recv => {
            let n = size(rng);
            let m = if rng.random_bool(0.9) { n } else { size(rng) };
            let send = |rs1, size, core| Instruction::Send { rs1, core, size, offset: rng_off(size) };
            let recv = |rd, size, core| Instruction::Recv { rd, core, size, offset: rng_off(size) };
            let (a, b) = (addr_reg(rng), addr_reg(rng));
            if op == Opcode::Send {
                peer = Some(recv(b, m, 0));
                send(a, n, 1)
            } else {
                peer = Some(send(b, m, 0));
                recv(a, n, 1)
            }
        }
        Opcode::Wait => {
            let ev = rng.random_range(0..DEFAULT_EVENT_REGISTERS as u8);
            let current = events[0][usize::from(ev)];
            let val = if rng.random_bool(0.7) { current as u16 } else { rng.random() };
            Instruction::Wait { ev, val }
        }
        Opcode::Sync => Instruction::Sync {
            ev: rng.random_range(0..DEFAULT_EVENT_REGISTERS as u8),
            core: rng.random_range(0..2),
        },
        other => instruction_for(rng, other, EncodingMode::Word64),
    };
    core0.code.push(instr);
    bundle.cores.push(core0);
    if ncores == 2 {
        let mut core1 = CoreConfig::new(1, peer.into_iter().collect());
        core1.local_mem_bytes = CASE_LMEM;
        bundle.cores.push(core1);
    }
    OpCase { bundle, regs, lmem, events, widths }
}

/// Byte offsets for send/recv: a function of the size so the pair stays in
/// range most of the time.
fn rng_off(size: u16) -> u16 {
    (size * 7) % 13
}

/// Register plan of generated programs:
/// - `$r0`, `$r1`: zero;
/// - `$r2`..`$r7`: source regions, `$r8`..`$r13`: destination regions;
/// - `$r14`, `$r15`: strides; `$r16`, `$r17`: shift-count tables of zero
///   and `0x01` bytes; `$r18`..`$r27`: scratch scalars;
/// - `$r28:$r29`, `$r30:$r31`: global addresses.
#[derive(Debug, Clone, Copy)]
pub struct ProgramShape {
    pub cores: usize,
    pub body_len: usize,
    pub mode: EncodingMode,
}

const PROG_LMEM: usize = 8192;
const PROG_GMEM: usize = 65536;
const SRC_SPAN: u32 = 2048;
const DST_BASE: u32 = 4096;
const SHIFT_TABLES: u32 = 7168;

fn src_reg(rng: &mut FuzzRng) -> Reg {
    Reg::r(rng.random_range(2..8))
}

fn dst_reg(rng: &mut FuzzRng) -> Reg {
    Reg::r(rng.random_range(8..14))
}

fn any_region(rng: &mut FuzzRng) -> Reg {
    Reg::r(rng.random_range(2..14))
}

fn shift_table(rng: &mut FuzzRng) -> Reg {
    match rng.random_range(0..40) {
        0 => any_region(rng),
        1..15 => Reg::r(16),
        _ => Reg::r(17),
    }
}

fn scratch(rng: &mut FuzzRng) -> Reg {
    Reg::r(rng.random_range(18..28))
}

fn prologue(rng: &mut FuzzRng, narrow: bool) -> Vec<Instruction> {
    let mut code = Vec::new();
    let imm = |v: u32| v as i32;
    for r in 2..8 {
        let v = if narrow { rng.random_range(0..1024) } else { rng.random_range(0..SRC_SPAN) };
        code.push(Instruction::Sldi { rd: Reg::r(r), imm: imm(v & !3) });
    }
    for r in 8..14 {
        let v =
            if narrow { rng.random_range(0..2048) + 2048 } else { DST_BASE + rng.random_range(0..SRC_SPAN) };
        code.push(Instruction::Sldi { rd: Reg::r(r), imm: imm(v & !3) });
    }
    for r in 14..16 {
        code.push(Instruction::Sldi { rd: Reg::r(r), imm: rng.random_range(0..4) });
    }
    code.push(Instruction::Sldi { rd: Reg::r(16), imm: SHIFT_TABLES as i32 });
    code.push(Instruction::Sldi { rd: Reg::r(17), imm: SHIFT_TABLES as i32 + 512 });
    code.push(Instruction::Ldi { rd: Reg::r(17), imm: 1, size: 512, offset: 0 });
    for r in 18..28 {
        let v = if narrow { i32::from(rng.random::<i16>()) } else { rng.random() };
        code.push(Instruction::Sldi { rd: Reg::r(r), imm: v });
    }
    for r in [28, 30] {
        code.push(Instruction::Sldi { rd: Reg::r(r), imm: rng.random_range(0..PROG_GMEM as i32 / 2) });
    }
    code
}

fn body_instruction(rng: &mut FuzzRng, mode: EncodingMode, variable: bool) -> Instruction {
    let wide = mode == EncodingMode::Word64;
    let len = rng.random_range(1..=32);
    let offset = |rng: &mut FuzzRng| {
        if wide && rng.random_bool(0.3) {
            Offset::new(rng.random_range(0..8), rng.random_range(0..16))
        } else {
            Offset::NONE
        }
    };
    let vec = |rng: &mut FuzzRng| VecOperands {
        rd: dst_reg(rng),
        rs1: any_region(rng),
        rs2: any_region(rng),
        len,
        offset: offset(rng),
    };
    let small_imm = |rng: &mut FuzzRng| {
        if wide {
            rng.random()
        } else {
            i32::from(rng.random::<i16>())
        }
    };
    let pair = |rng: &mut FuzzRng| Reg::r(if rng.random_bool(0.5) { 28 } else { 30 });
    loop {
        let op = *Opcode::ALL.choose(rng).expect("nonempty");
        let instr = match op {
            Opcode::Sldi => Instruction::Sldi { rd: scratch(rng), imm: small_imm(rng) },
            Opcode::Sld => Instruction::Sld {
                rd: scratch(rng),
                rs1: pair(rng),
                offset: if wide { rng.random_range(0..1024) } else { 0 },
            },
            Opcode::Sadd => Instruction::Sadd { rd: scratch(rng), rs1: scratch(rng), rs2: scratch(rng) },
            Opcode::Ssub => Instruction::Ssub { rd: scratch(rng), rs1: scratch(rng), rs2: scratch(rng) },
            Opcode::Smul => Instruction::Smul { rd: scratch(rng), rs1: scratch(rng), rs2: scratch(rng) },
            Opcode::Saddi => Instruction::Saddi { rd: scratch(rng), rs1: scratch(rng), imm: small_imm(rng) },
            Opcode::Smuli => Instruction::Smuli { rd: scratch(rng), rs1: scratch(rng), imm: small_imm(rng) },
            // one-bit elements would turn the 0x01 shift table negative
            Opcode::Setbw if variable => {
                Instruction::Setbw { ibiw: width(rng).max(2), obiw: width(rng).max(2) }
            }
            Opcode::Vrsu | Opcode::Vrsl if !variable => continue,
            Opcode::Setbw => continue,
            // programs carry no arrays; mvmul is covered by the lowering tests
            Opcode::Mvmul => continue,
            Opcode::Vvadd => Instruction::Vvadd(vec(rng)),
            Opcode::Vsub => Instruction::Vsub(vec(rng)),
            Opcode::Vmul => Instruction::Vmul(vec(rng)),
            Opcode::Vdmul => Instruction::Vdmul(vec(rng)),
            Opcode::Vmax => Instruction::Vmax(vec(rng)),
            Opcode::Vvsll => Instruction::Vvsll(VecOperands { rs2: shift_table(rng), ..vec(rng) }),
            Opcode::Vvsra => Instruction::Vvsra(VecOperands { rs2: shift_table(rng), ..vec(rng) }),
            Opcode::Vrsu => {
                Instruction::Vrsu(VecOperands { rs1: src_reg(rng), rs2: scratch(rng), ..vec(rng) })
            }
            Opcode::Vrsl => {
                Instruction::Vrsl(VecOperands { rs1: src_reg(rng), rs2: scratch(rng), ..vec(rng) })
            }
            Opcode::Vrelu | Opcode::Vtanh | Opcode::Vsigm => {
                let u = UnaryOperands { rd: dst_reg(rng), rs1: any_region(rng), len, offset: offset(rng) };
                match op {
                    Opcode::Vrelu => Instruction::Vrelu(u),
                    Opcode::Vtanh => Instruction::Vtanh(u),
                    _ => Instruction::Vsigm(u),
                }
            }
            Opcode::Vavg => Instruction::Vavg {
                rd: dst_reg(rng),
                rs1: any_region(rng),
                rs2: Reg::r(rng.random_range(14..16)),
                len,
                offset: if wide { rng.random_range(0..16) } else { 0 },
            },
            Opcode::Vmv => Instruction::Vmv {
                rd: dst_reg(rng),
                rs1: src_reg(rng),
                rs2: Reg::r(rng.random_range(14..16)),
                len,
            },
            Opcode::Ld => Instruction::Ld(CopyOperands {
                rd: dst_reg(rng),
                rs1: pair(rng),
                size: rng.random_range(1..=256),
                offset: offset(rng),
            }),
            Opcode::St => Instruction::St(CopyOperands {
                rd: pair(rng),
                rs1: any_region(rng),
                size: rng.random_range(1..=256),
                offset: offset(rng),
            }),
            Opcode::Ldi => Instruction::Ldi {
                rd: dst_reg(rng),
                imm: rng.random(),
                size: rng.random_range(1..=128),
                offset: if wide { rng.random_range(0..64) } else { 0 },
            },
            Opcode::Lmv => Instruction::Lmv(CopyOperands {
                rd: dst_reg(rng),
                rs1: src_reg(rng),
                size: rng.random_range(1..=256),
                offset: offset(rng),
            }),
            Opcode::Send | Opcode::Recv | Opcode::Wait | Opcode::Sync => continue,
        };
        return instr;
    }
}

/// A random straight-line program bundle. Multi-core bundles interleave local
/// work with matched `send`/`recv` pairs and `sync`/`wait` phases in one
/// global order, so they terminate unless a local instruction traps.
pub fn random_program(rng: &mut FuzzRng, shape: ProgramShape) -> ProgramBundle {
    let narrow = shape.mode == EncodingMode::Word32;
    let variable = rng.random_bool(0.8);
    let mut bundle = ProgramBundle {
        mode: shape.mode,
        global_mem_bytes: PROG_GMEM,
        variable_bitwidth_supported: variable,
        ..ProgramBundle::default()
    };
    let init_len = rng.random_range(0..4096);
    bundle.global_mem_init.push(MemInit {
        address: rng.random_range(0..1024),
        bytes: (0..init_len).map(|_| rng.random()).collect(),
    });
    let mut code: Vec<Vec<Instruction>> = (0..shape.cores).map(|_| prologue(rng, narrow)).collect();
    // random lmem contents come from ldi and ld
    for c in code.iter_mut() {
        for _ in 0..4 {
            c.push(Instruction::Ldi {
                rd: src_reg(rng),
                imm: rng.random(),
                size: rng.random_range(1..=128),
                offset: 0,
            });
            c.push(Instruction::Ld(CopyOperands {
                rd: src_reg(rng),
                rs1: Reg::r(28),
                size: rng.random_range(1..=256),
                offset: Offset::NONE,
            }));
        }
    }
    let mut next_ev = 0u8;
    let mut emitted = 0;
    while emitted < shape.body_len {
        let c = rng.random_range(0..shape.cores);
        if shape.cores > 1 && rng.random_bool(0.1) {
            let d = (c + rng.random_range(1..shape.cores)) % shape.cores;
            if rng.random_bool(0.6) || usize::from(next_ev) >= DEFAULT_EVENT_REGISTERS {
                let size = rng.random_range(1..=if narrow { 0x7ff } else { 512 });
                code[c].push(Instruction::Send { rs1: src_reg(rng), core: d as u16, size, offset: 0 });
                code[d].push(Instruction::Recv { rd: dst_reg(rng), core: c as u16, size, offset: 0 });
            } else {
                let times = rng.random_range(1..=3);
                for _ in 0..times {
                    code[c].push(Instruction::Sync { ev: next_ev, core: d as u16 });
                }
                code[d].push(Instruction::Wait { ev: next_ev, val: times });
                next_ev += 1;
            }
            emitted += 2;
        } else {
            code[c].push(body_instruction(rng, shape.mode, variable));
            emitted += 1;
        }
    }
    for (i, c) in code.into_iter().enumerate() {
        let mut core = CoreConfig::new(i, c);
        core.local_mem_bytes = PROG_LMEM;
        bundle.cores.push(core);
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a =
            random_program(&mut rng(7), ProgramShape { cores: 3, body_len: 50, mode: EncodingMode::Word64 });
        let b =
            random_program(&mut rng(7), ProgramShape { cores: 3, body_len: 50, mode: EncodingMode::Word64 });
        assert_eq!(a, b);
    }

    #[test]
    fn generated_programs_validate() {
        let mut r = rng(11);
        for mode in [EncodingMode::Word64, EncodingMode::Word32] {
            for cores in 1..=3 {
                let b = random_program(&mut r, ProgramShape { cores, body_len: 80, mode });
                b.validate().unwrap();
            }
        }
    }

    #[test]
    fn op_cases_validate() {
        let mut r = rng(3);
        for op in Opcode::ALL {
            for _ in 0..50 {
                let case = op_case(&mut r, op);
                case.bundle.validate().unwrap_or_else(|e| panic!("{op:?}: {e}"));
            }
        }
    }

    #[test]
    fn random_instructions_encode() {
        let mut r = rng(5);
        for mode in [EncodingMode::Word64, EncodingMode::Word32] {
            for _ in 0..2000 {
                let i = random_instruction(&mut r, mode);
                isa::encode(&i, mode).unwrap_or_else(|e| panic!("{i}: {e}"));
            }
        }
    }
}
