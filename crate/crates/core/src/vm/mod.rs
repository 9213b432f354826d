//! Deterministic functional simulator.
//!
//! The machine interleaves cores in strict round-robin order: every call to
//! [`Machine::step`] starts at the core after the one that last ran and
//! executes one instruction on the first core able to complete one. A
//! `send`/`recv` pair completes both sides in the same step. When no core can
//! make progress and at least one is still blocked, the machine traps with
//! [`TrapKind::Deadlock`].
//!
//! Data conventions:
//! - vector and matrix elements are signed two's complement, stored
//!   little-endian in `ceil(biw / 8)` bytes and sign-extended from bit
//!   `biw - 1` when read; writes store the sign-extended image;
//! - elementwise results wrap modulo `2^biw`, `mvmul` and activations saturate;
//! - a 64-bit global address is the register pair `$rN` (bits 31:0) and
//!   `$r(N+1)` (bits 63:32) with `N` even;
//! - local memory and event registers are zero at power-up.

mod exec;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Serialize;

use crate::isa::{Instruction, Offset, Opcode, Slot, REGISTER_COUNT};
use crate::manifest::{BundleErrors, Matrix, ProgramBundle, QFormat};

/// Element bit-widths and the byte-widths derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitWidthState {
    pub ibiw: u8,
    pub obiw: u8,
    pub ibyw: u8,
    pub obyw: u8,
}

impl BitWidthState {
    pub fn new(ibiw: u8, obiw: u8) -> BitWidthState {
        BitWidthState { ibiw, obiw, ibyw: ibiw.div_ceil(8), obyw: obiw.div_ceil(8) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreStatus {
    Ready,
    BlockedSend(usize),
    BlockedRecv(usize),
    BlockedWait { ev: u8, val: u16 },
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreState {
    pub pc: usize,
    pub regs: [u32; REGISTER_COUNT],
    pub lmem: Vec<u8>,
    pub events: Vec<u32>,
    pub bw: BitWidthState,
    pub status: CoreStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TrapKind {
    OutOfBoundsLocal,
    OutOfBoundsGlobal,
    UnknownGroup,
    LengthMismatch,
    OverlapUndefined,
    NegativeShift,
    InvalidInstructionForHardware,
    SizeMismatchSendRecv,
    Deadlock,
    EvenRegisterRequired,
    InvalidOperand,
    StepLimitExceeded,
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trap {
    pub kind: TrapKind,
    pub core: usize,
    pub pc: usize,
    pub detail: String,
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} on core {} at pc {}: {}", self.kind, self.core, self.pc, self.detail)
    }
}

impl std::error::Error for Trap {}

/// How overlapping source and destination ranges are treated where the
/// result would otherwise be undefined (`lmv`, `vmv`, widening `vrsu`/`vrsl`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapMode {
    /// Trap with [`TrapKind::OverlapUndefined`].
    #[default]
    Strict,
    /// Copy through a temporary buffer.
    Permissive,
}

/// Deliberate defects for exercising the differential checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    VvaddOffByOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VmOptions {
    pub overlap: OverlapMode,
    /// Keep every trace event for [`Machine::trace`].
    pub keep_trace: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

/// One observable write performed by an instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Reg { reg: u8, value: u32 },
    Local { core: usize, addr: u64, len: u64 },
    Global { addr: u64, len: u64 },
    Event { core: usize, ev: u8, value: u32 },
    Message { from: usize, to: usize, bytes: u64 },
    BitWidth { ibiw: u8, obiw: u8 },
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Effect::Reg { reg, value } => write!(f, "$r{reg}={value:#010x}"),
            Effect::Local { core, addr, len } => {
                write!(f, "lmem{core}[{addr:#x}..{:#x})", addr + len)
            }
            Effect::Global { addr, len } => write!(f, "gmem[{addr:#x}..{:#x})", addr + len),
            Effect::Event { core, ev, value } => write!(f, "ev{core}[{ev}]={value}"),
            Effect::Message { from, to, bytes } => write!(f, "msg {from}->{to} {bytes}B"),
            Effect::BitWidth { ibiw, obiw } => write!(f, "bw={ibiw}/{obiw}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub core: usize,
    pub pc: usize,
    pub instr: Instruction,
    pub effects: Vec<Effect>,
}

impl TraceEvent {
    /// Canonical disassembly of the executed instruction.
    pub fn text(&self) -> String {
        self.instr.to_string()
    }
}

/// Tab-separated: step, core, pc, disassembly, effects.
impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t", self.step, self.core, self.pc, self.instr)?;
        if self.effects.is_empty() {
            return f.write_str("-");
        }
        for (i, e) in self.effects.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Progressed,
    AllBlockedOrFinished,
    Trapped(Trap),
}

/// Statistics of a run, serialized as
/// `{steps, per_opcode, per_core, bytes_sent, traps}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunResult {
    pub steps: u64,
    pub per_opcode: BTreeMap<String, u64>,
    pub per_core: Vec<u64>,
    pub bytes_sent: u64,
    pub traps: Vec<Trap>,
}

impl RunResult {
    pub fn trap(&self) -> Option<&Trap> {
        self.traps.first()
    }

    pub fn is_clean(&self) -> bool {
        self.traps.is_empty()
    }
}

/// Bytes offered by a blocked sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Machine {
    cores: Vec<CoreState>,
    code: Vec<Vec<Instruction>>,
    groups: Vec<Vec<Matrix>>,
    gmem: Vec<u8>,
    mailboxes: BTreeMap<(usize, usize), VecDeque<Message>>,
    step_count: u64,
    last_started: Option<usize>,
    variable_bitwidth: bool,
    qformat: Option<QFormat>,
    options: VmOptions,
    trap: Option<Trap>,
    last_events: Vec<TraceEvent>,
    trace: Vec<TraceEvent>,
    per_opcode: BTreeMap<Opcode, u64>,
    per_core: Vec<u64>,
    traffic: BTreeMap<(usize, usize), (u64, u64)>,
}

/// Address of an operand: `base + elem_bytes * offset.value` when the slot's
/// select bit is set, `base` otherwise. Byte-offset instructions pass
/// `elem_bytes = 1`.
pub fn effective_address(base: u32, offset: Offset, slot: Slot, elem_bytes: u32) -> u64 {
    if offset.applies_to(slot) {
        u64::from(base) + u64::from(elem_bytes) * u64::from(offset.value)
    } else {
        u64::from(base)
    }
}

/// 64-bit FNV-1a, used as a quick digest of global memory.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

impl Machine {
    pub fn load(bundle: &ProgramBundle) -> Result<Machine, BundleErrors> {
        Machine::load_with(bundle, VmOptions::default())
    }

    pub fn load_with(bundle: &ProgramBundle, options: VmOptions) -> Result<Machine, BundleErrors> {
        bundle.validate()?;
        let mut gmem = vec![0u8; bundle.global_mem_bytes];
        for init in &bundle.global_mem_init {
            let start = init.address as usize;
            gmem[start..start + init.bytes.len()].copy_from_slice(&init.bytes);
        }
        let cores = bundle
            .cores
            .iter()
            .map(|c| CoreState {
                pc: 0,
                regs: [0; REGISTER_COUNT],
                lmem: vec![0; c.local_mem_bytes],
                events: vec![0; c.event_register_count],
                bw: BitWidthState::new(c.initial_ibiw, c.initial_obiw),
                status: if c.code.is_empty() { CoreStatus::Finished } else { CoreStatus::Ready },
            })
            .collect();
        let groups = bundle
            .cores
            .iter()
            .map(|c| (0..c.groups.len()).map(|g| c.group_matrix(g).expect("validated bundle")).collect())
            .collect();
        Ok(Machine {
            cores,
            code: bundle.cores.iter().map(|c| c.code.clone()).collect(),
            groups,
            gmem,
            mailboxes: BTreeMap::new(),
            step_count: 0,
            last_started: None,
            variable_bitwidth: bundle.variable_bitwidth_supported,
            qformat: bundle.activation_qformat,
            options,
            trap: None,
            last_events: Vec::new(),
            trace: Vec::new(),
            per_opcode: BTreeMap::new(),
            per_core: vec![0; bundle.cores.len()],
            traffic: BTreeMap::new(),
        })
    }

    pub fn cores(&self) -> &[CoreState] {
        &self.cores
    }

    pub fn core(&self, id: usize) -> &CoreState {
        &self.cores[id]
    }

    /// Direct access to a core's architectural state, for test setups.
    pub fn core_mut(&mut self, id: usize) -> &mut CoreState {
        &mut self.cores[id]
    }

    pub fn code(&self, id: usize) -> &[Instruction] {
        &self.code[id]
    }

    pub fn gmem(&self) -> &[u8] {
        &self.gmem
    }

    pub fn gmem_mut(&mut self) -> &mut [u8] {
        &mut self.gmem
    }

    pub fn gmem_digest(&self) -> u64 {
        fnv1a64(&self.gmem)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn trap(&self) -> Option<&Trap> {
        self.trap.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.cores.iter().all(|c| c.status == CoreStatus::Finished)
    }

    /// Events emitted by the most recent step.
    pub fn last_events(&self) -> &[TraceEvent] {
        &self.last_events
    }

    /// All events so far; empty unless [`VmOptions::keep_trace`] is set.
    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn pending_messages(&self, from: usize, to: usize) -> usize {
        self.mailboxes.get(&(from, to)).map_or(0, VecDeque::len)
    }

    /// Bytes (sent, received) per ordered core pair.
    pub fn traffic(&self) -> &BTreeMap<(usize, usize), (u64, u64)> {
        &self.traffic
    }

    pub fn result(&self) -> RunResult {
        RunResult {
            steps: self.step_count,
            per_opcode: self.per_opcode.iter().map(|(op, n)| (op.mnemonic().to_string(), *n)).collect(),
            per_core: self.per_core.clone(),
            bytes_sent: self.traffic.values().map(|(sent, _)| sent).sum(),
            traps: self.trap.iter().cloned().collect(),
        }
    }

    /// Steps until every core finishes, a trap, or `max_steps` more steps.
    pub fn run(&mut self, max_steps: u64) -> RunResult {
        let mut taken = 0;
        loop {
            if self.trap.is_some() || self.is_finished() {
                break;
            }
            if taken >= max_steps {
                let (core, pc) = self
                    .cores
                    .iter()
                    .enumerate()
                    .find(|(_, c)| c.status != CoreStatus::Finished)
                    .map(|(i, c)| (i, c.pc))
                    .unwrap_or_default();
                self.trap = Some(Trap {
                    kind: TrapKind::StepLimitExceeded,
                    core,
                    pc,
                    detail: format!("step limit of {max_steps} reached"),
                });
                break;
            }
            match self.step() {
                StepOutcome::Progressed => taken += 1,
                StepOutcome::AllBlockedOrFinished | StepOutcome::Trapped(_) => break,
            }
        }
        self.result()
    }

    pub fn step(&mut self) -> StepOutcome {
        if let Some(trap) = &self.trap {
            return StepOutcome::Trapped(trap.clone());
        }
        self.last_events.clear();
        let n = self.cores.len();
        let start = self.last_started.map_or(0, |c| (c + 1) % n.max(1));
        for k in 0..n {
            let c = (start + k) % n;
            if self.cores[c].status == CoreStatus::Finished {
                continue;
            }
            match self.try_execute(c) {
                Ok(true) => {
                    self.last_started = Some(c);
                    self.step_count += 1;
                    if self.options.keep_trace {
                        self.trace.extend(self.last_events.iter().cloned());
                    }
                    return StepOutcome::Progressed;
                }
                Ok(false) => {}
                Err(trap) => {
                    self.last_events.clear();
                    self.trap = Some(trap.clone());
                    return StepOutcome::Trapped(trap);
                }
            }
        }
        if let Some((c, state)) =
            self.cores.iter().enumerate().find(|(_, s)| s.status != CoreStatus::Finished)
        {
            let trap = Trap {
                kind: TrapKind::Deadlock,
                core: c,
                pc: state.pc,
                detail: format!("no core can progress; core {c} is {:?}", state.status),
            };
            self.trap = Some(trap.clone());
            return StepOutcome::Trapped(trap);
        }
        StepOutcome::AllBlockedOrFinished
    }

    fn trap_at(&self, core: usize, kind: TrapKind, detail: String) -> Trap {
        Trap { kind, core, pc: self.cores[core].pc, detail }
    }

    /// Executes the current instruction of core `c`. Returns `Ok(false)` when
    /// the core is blocked.
    fn try_execute(&mut self, c: usize) -> Result<bool, Trap> {
        let pc = self.cores[c].pc;
        let instr = self.code[c][pc];
        let mut effects = Vec::new();
        match instr {
            Instruction::Send { core, .. } => return self.exec_send(c, usize::from(core)),
            Instruction::Recv { core, .. } => return self.exec_recv(c, usize::from(core)),
            Instruction::Wait { ev, val } => {
                let slot = self.cores[c].events.get_mut(usize::from(ev)).ok_or_else(|| Trap {
                    kind: TrapKind::InvalidOperand,
                    core: c,
                    pc,
                    detail: format!("event register {ev} does not exist"),
                })?;
                if *slot != u32::from(val) {
                    self.cores[c].status = CoreStatus::BlockedWait { ev, val };
                    return Ok(false);
                }
                *slot = 0;
                effects.push(Effect::Event { core: c, ev, value: 0 });
            }
            Instruction::Sync { ev, core } => {
                let target = usize::from(core);
                let slot =
                    self.cores.get_mut(target).and_then(|t| t.events.get_mut(usize::from(ev))).ok_or_else(
                        || Trap {
                            kind: TrapKind::InvalidOperand,
                            core: c,
                            pc,
                            detail: format!("event register {ev} of core {target} does not exist"),
                        },
                    )?;
                *slot = slot.wrapping_add(1);
                effects.push(Effect::Event { core: target, ev, value: *slot });
            }
            _ => {
                let ctx = exec::Ctx {
                    core: c,
                    groups: &self.groups[c],
                    qformat: self.qformat,
                    variable_bitwidth: self.variable_bitwidth,
                    overlap: self.options.overlap,
                    fault: self.options.fault,
                };
                exec::execute(&mut self.cores[c], &instr, &ctx, &mut self.gmem, &mut effects)
                    .map_err(|(kind, detail)| Trap { kind, core: c, pc, detail })?;
            }
        }
        self.retire(c, effects);
        Ok(true)
    }

    fn retire(&mut self, c: usize, effects: Vec<Effect>) {
        let state = &mut self.cores[c];
        let instr = self.code[c][state.pc];
        self.last_events.push(TraceEvent { step: self.step_count, core: c, pc: state.pc, instr, effects });
        *self.per_opcode.entry(instr.opcode()).or_default() += 1;
        self.per_core[c] += 1;
        state.pc += 1;
        state.status = if state.pc == self.code[c].len() { CoreStatus::Finished } else { CoreStatus::Ready };
    }

    fn current(&self, core: usize) -> Option<Instruction> {
        let state = &self.cores[core];
        (state.status != CoreStatus::Finished).then(|| self.code[core][state.pc])
    }

    fn exec_send(&mut self, c: usize, dest: usize) -> Result<bool, Trap> {
        if dest >= self.cores.len() || dest == c {
            return Err(self.trap_at(c, TrapKind::InvalidOperand, format!("send to core {dest}")));
        }
        match self.current(dest) {
            Some(Instruction::Recv { core, .. }) if usize::from(core) == c => {
                self.rendezvous(c, dest, c)?;
                Ok(true)
            }
            _ => {
                if self.pending_messages(c, dest) == 0 {
                    let Instruction::Send { rs1, size, offset, .. } = self.code[c][self.cores[c].pc] else {
                        unreachable!()
                    };
                    // an out-of-range source is reported when the transfer happens
                    let state = &self.cores[c];
                    let start = u64::from(state.regs[usize::from(rs1.index())]) + u64::from(offset);
                    let end = start + u64::from(size);
                    if end <= state.lmem.len() as u64 {
                        let bytes = state.lmem[start as usize..end as usize].to_vec();
                        self.mailboxes.entry((c, dest)).or_default().push_back(Message { bytes });
                    }
                }
                self.cores[c].status = CoreStatus::BlockedSend(dest);
                Ok(false)
            }
        }
    }

    fn exec_recv(&mut self, c: usize, src: usize) -> Result<bool, Trap> {
        if src >= self.cores.len() || src == c {
            return Err(self.trap_at(c, TrapKind::InvalidOperand, format!("recv from core {src}")));
        }
        match self.current(src) {
            Some(Instruction::Send { core, .. }) if usize::from(core) == c => {
                self.rendezvous(src, c, c)?;
                Ok(true)
            }
            _ => {
                self.cores[c].status = CoreStatus::BlockedRecv(src);
                Ok(false)
            }
        }
    }

    /// Completes a matched send/recv pair. Checks run in this order: equal
    /// sizes, sender range, receiver range. Traps are reported on `visited`.
    fn rendezvous(&mut self, sender: usize, receiver: usize, visited: usize) -> Result<(), Trap> {
        let Instruction::Send { rs1, size: send_size, offset: send_off, .. } =
            self.code[sender][self.cores[sender].pc]
        else {
            unreachable!()
        };
        let Instruction::Recv { rd, size: recv_size, offset: recv_off, .. } =
            self.code[receiver][self.cores[receiver].pc]
        else {
            unreachable!()
        };
        if send_size != recv_size {
            return Err(self.trap_at(
                visited,
                TrapKind::SizeMismatchSendRecv,
                format!("core {sender} sends {send_size} bytes, core {receiver} receives {recv_size}"),
            ));
        }
        let size = u64::from(send_size);
        let range = |state: &CoreState, base: u32, off: u16| {
            let start = u64::from(base) + u64::from(off);
            (start + size <= state.lmem.len() as u64).then_some(start as usize..(start + size) as usize)
        };
        let src_state = &self.cores[sender];
        let src = range(src_state, src_state.regs[usize::from(rs1.index())], send_off).ok_or_else(|| {
            self.trap_at(
                visited,
                TrapKind::OutOfBoundsLocal,
                format!("send source of {size} bytes outside core {sender}'s local memory"),
            )
        })?;
        let dst_state = &self.cores[receiver];
        let dst = range(dst_state, dst_state.regs[usize::from(rd.index())], recv_off).ok_or_else(|| {
            self.trap_at(
                visited,
                TrapKind::OutOfBoundsLocal,
                format!("recv destination of {size} bytes outside core {receiver}'s local memory"),
            )
        })?;
        let bytes = match self.mailboxes.get_mut(&(sender, receiver)).and_then(VecDeque::pop_front) {
            Some(msg) => msg.bytes,
            None => self.cores[sender].lmem[src].to_vec(),
        };
        let dst_start = dst.start as u64;
        self.cores[receiver].lmem[dst].copy_from_slice(&bytes);
        let traffic = self.traffic.entry((sender, receiver)).or_default();
        traffic.0 += size;
        traffic.1 += bytes.len() as u64;

        let send_fx = vec![Effect::Message { from: sender, to: receiver, bytes: size }];
        let recv_fx = vec![Effect::Local { core: receiver, addr: dst_start, len: size }];
        if visited == sender {
            self.retire(sender, send_fx);
            self.retire(receiver, recv_fx);
        } else {
            self.retire(receiver, recv_fx);
            self.retire(sender, send_fx);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
