//! Lowering of small multi-layer perceptrons to straight-line programs.
//!
//! Each layer is placed on one core or split row-wise across several. The
//! first core of a placement is the layer's home: it holds the full output
//! vector, and the next layer's input is distributed from there. Per layer
//! fragment the emitted code is
//!
//! ```text
//! mvmul out, in, group        (imm_relu set when ReLU fuses)
//! vvadd out, out, bias
//! vrelu | vtanh | vsigm out   (unless fused or absent)
//! ```
//!
//! preceded by transfers of the input and followed by transfers of the result.
//! ReLU fuses into `mvmul` only when the fragment's bias is all zero, since
//! `relu(x) + b` differs from `relu(x + b)` otherwise. All transfers appear in
//! one global order on every core, which rules out deadlock.
//!
//! v1 limitation: every layer must use one bit-width for inputs and outputs,
//! and all layers must agree, because `vvadd` reads the `mvmul` result at
//! `ibiw`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{CopyOperands, EncodingMode, Instruction, Offset, Reg, UnaryOperands, VecOperands};
use crate::manifest::{
    ArrayGroup, CoreConfig, LogicalArray, Matrix, MemInit, ProgramBundle, QFormat, Tile, DEFAULT_BIT_WIDTH,
    DEFAULT_LOCAL_MEM_BYTES,
};
use crate::oracle::Activation;

/// Cores computing one layer: a single core or a row split across several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placement {
    Single(u32),
    Split(Vec<u32>),
}

impl Placement {
    pub fn cores(&self) -> Vec<u32> {
        match self {
            Placement::Single(c) => vec![*c],
            Placement::Split(cs) => cs.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Transport {
    #[default]
    SendRecv,
    /// `st` to a global scratch slot, `sync` the receiver, `wait`, `ld`.
    GlobalMemory,
}

/// A network description, read from JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// `[inputs, hidden..., outputs]`.
    pub layer_dims: Vec<usize>,
    /// Per layer, `layer_dims[l + 1]` rows of `layer_dims[l]` weights.
    pub weights: Vec<Vec<Vec<i32>>>,
    pub biases: Vec<Vec<i32>>,
    pub activations: Vec<Activation>,
    /// Per layer `(ibiw, obiw)`; empty means 8-bit everywhere.
    #[serde(default)]
    pub widths: Vec<(u8, u8)>,
    pub core_assignment: Vec<Placement>,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default = "yes")]
    pub variable_bitwidth: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qformat: Option<QFormat>,
    /// Largest logical array as `[rows, cols]`; larger fragments are tiled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossbar: Option<[usize; 2]>,
    #[serde(default = "default_lmem")]
    pub local_mem_bytes: usize,
    /// Primary input written into global memory, if given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Vec<i64>>,
}

fn yes() -> bool {
    true
}

fn default_lmem() -> usize {
    DEFAULT_LOCAL_MEM_BYTES
}

impl MlpSpec {
    /// A spec with every layer on core 0, 8-bit widths and no activation.
    pub fn new(layer_dims: Vec<usize>, weights: Vec<Vec<Vec<i32>>>, biases: Vec<Vec<i32>>) -> MlpSpec {
        let layers = weights.len();
        MlpSpec {
            layer_dims,
            weights,
            biases,
            activations: vec![Activation::None; layers],
            widths: Vec::new(),
            core_assignment: vec![Placement::Single(0); layers],
            transport: Transport::SendRecv,
            variable_bitwidth: true,
            qformat: None,
            crossbar: None,
            local_mem_bytes: DEFAULT_LOCAL_MEM_BYTES,
            input: None,
        }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_matrix(&self, layer: usize) -> Matrix {
        Matrix::from_rows(&self.weights[layer])
    }

    /// The common element bit-width of the network.
    pub fn bits(&self) -> u8 {
        self.widths.first().map_or(DEFAULT_BIT_WIDTH, |w| w.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer {layer}: {what}")]
    ShapeMismatch { layer: usize, what: String },
    #[error("layer {layer}: widths {ibiw}/{obiw} unsupported (all layers need one width in 1..=32)")]
    WidthUnsupported { layer: usize, ibiw: u8, obiw: u8 },
    #[error("layer {layer} needs {needed} bytes of local memory on core {core}, which has {available}")]
    LayerTooLargeForLocalMemory { layer: usize, core: u32, needed: u64, available: usize },
    #[error("cannot split {rows} rows into {parts} parts")]
    BadSplit { rows: usize, parts: usize },
    #[error("layer {layer}: core {core} appears twice in its placement")]
    DuplicateCore { layer: usize, core: u32 },
    #[error("layer {layer}: input value {value} does not fit {bits} bits")]
    InputOutOfRange { layer: usize, value: i64, bits: u8 },
}

/// Contiguous row ranges for `parts` parts; the first `rows % parts` parts
/// get one extra row.
pub fn split_rows(rows: usize, parts: usize) -> Result<Vec<Range<usize>>, LowerError> {
    if parts == 0 || parts > rows {
        return Err(LowerError::BadSplit { rows, parts });
    }
    let (base, extra) = (rows / parts, rows % parts);
    let mut start = 0;
    Ok((0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Region {
    pub name: String,
    pub start: u64,
    pub len: u64,
}

/// One layer's rows computed on one core.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fragment {
    pub layer: usize,
    pub core: u32,
    pub group: usize,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoweringPlan {
    pub bits: u8,
    pub input_addr: u64,
    pub input_len: usize,
    pub output_addr: u64,
    pub output_len: usize,
    /// Local memory regions per core, in allocation order.
    pub regions: BTreeMap<u32, Vec<Region>>,
    pub fragments: Vec<Fragment>,
    /// `(receiver, event register)` per global-memory transfer.
    pub events: Vec<(u32, u8)>,
}

impl LoweringPlan {
    pub fn elem_bytes(&self) -> usize {
        usize::from(self.bits.div_ceil(8))
    }

    /// Writes `input` into `gmem` at the input address.
    pub fn write_input(&self, gmem: &mut [u8], input: &[i64]) {
        let bytes = encode_elements(input, self.bits);
        let at = self.input_addr as usize;
        gmem[at..at + bytes.len()].copy_from_slice(&bytes);
    }

    pub fn read_output(&self, gmem: &[u8]) -> Vec<i64> {
        let at = self.output_addr as usize;
        decode_elements(&gmem[at..at + self.output_len * self.elem_bytes()], self.bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lowered {
    pub bundle: ProgramBundle,
    pub plan: LoweringPlan,
}

/// Stores values as sign-extended little-endian elements of `bits` bits.
pub fn encode_elements(values: &[i64], bits: u8) -> Vec<u8> {
    let bytes = usize::from(bits.div_ceil(8));
    let shift = 64 - u32::from(bits);
    values
        .iter()
        .flat_map(|v| {
            let wrapped = (v << shift) >> shift;
            wrapped.to_le_bytes().into_iter().take(bytes)
        })
        .collect()
}

pub fn decode_elements(bytes: &[u8], bits: u8) -> Vec<i64> {
    let width = usize::from(bits.div_ceil(8));
    let shift = 64 - u32::from(bits);
    bytes
        .chunks_exact(width)
        .map(|chunk| {
            let mut raw = [0u8; 8];
            raw[..width].copy_from_slice(chunk);
            (i64::from_le_bytes(raw) << shift) >> shift
        })
        .collect()
}

fn bits_needed(values: &[i32]) -> u8 {
    values.iter().map(|w| 33 - (if *w < 0 { !*w } else { *w }).leading_zeros() as u8).max().unwrap_or(1)
}

/// Register allocation by value: `$r0` and `$r1` stay zero, `$r2`..`$r27`
/// hold local addresses round-robin, `$r28`/`$r30` hold global addresses
/// whose high halves `$r29`/`$r31` stay zero.
#[derive(Debug, Default)]
struct Regs {
    values: [Option<u32>; 32],
    next_local: u8,
    next_global: u8,
}

struct CoreCode {
    id: u32,
    code: Vec<Instruction>,
    regs: Regs,
    next_free: u64,
    regions: Vec<Region>,
    arrays: Vec<LogicalArray>,
    groups: Vec<ArrayGroup>,
    events_used: u8,
}

impl CoreCode {
    fn new(id: u32) -> CoreCode {
        CoreCode {
            id,
            code: Vec::new(),
            regs: Regs::default(),
            next_free: 0,
            regions: Vec::new(),
            arrays: Vec::new(),
            groups: Vec::new(),
            events_used: 0,
        }
    }

    fn alloc(&mut self, name: String, len: u64, align: u64) -> u64 {
        let start = self.next_free.div_ceil(align) * align;
        self.next_free = start + len;
        self.regions.push(Region { name, start, len });
        start
    }

    fn local(&mut self, value: u64) -> Reg {
        let value = value as u32;
        if value == 0 {
            return Reg::r(0);
        }
        if let Some(r) = (2..28).find(|&r| self.regs.values[r] == Some(value)) {
            return Reg::r(r as u8);
        }
        let r = 2 + self.regs.next_local;
        self.regs.next_local = (self.regs.next_local + 1) % 26;
        self.regs.values[usize::from(r)] = Some(value);
        self.code.push(Instruction::Sldi { rd: Reg::r(r), imm: value as i32 });
        Reg::r(r)
    }

    fn global(&mut self, value: u64) -> Reg {
        let value = value as u32;
        if value == 0 {
            return Reg::r(0);
        }
        if let Some(r) = [28, 30].into_iter().find(|&r| self.regs.values[r] == Some(value)) {
            return Reg::r(r as u8);
        }
        let r = 28 + 2 * self.regs.next_global;
        self.regs.next_global ^= 1;
        self.regs.values[usize::from(r)] = Some(value);
        self.code.push(Instruction::Sldi { rd: Reg::r(r), imm: value as i32 });
        Reg::r(r)
    }

    fn add_group(&mut self, w: &Matrix, crossbar: Option<[usize; 2]>) -> usize {
        let [tile_rows, tile_cols] = crossbar.unwrap_or([w.rows, w.cols]);
        let group_id = self.groups.len();
        let mut tiles = Vec::new();
        for r0 in (0..w.rows).step_by(tile_rows.max(1)) {
            for c0 in (0..w.cols).step_by(tile_cols.max(1)) {
                let rows = tile_rows.min(w.rows - r0);
                let cols = tile_cols.min(w.cols - c0);
                let data = (r0..r0 + rows).flat_map(|r| w.row(r)[c0..c0 + cols].to_vec()).collect();
                let array_id = self.arrays.len();
                self.arrays.push(LogicalArray { array_id, weights: Matrix { rows, cols, data } });
                tiles.push(Tile { array_id, row_offset: r0, col_offset: c0 });
            }
        }
        self.groups.push(ArrayGroup { group_id, total_rows: w.rows, total_cols: w.cols, tiles });
        group_id
    }
}

struct Lowering<'a> {
    spec: &'a MlpSpec,
    cores: BTreeMap<u32, CoreCode>,
    bytes: u64,
    gmem_next: u64,
    gmem_init: Vec<MemInit>,
    events: Vec<(u32, u8)>,
}

impl Lowering<'_> {
    fn core(&mut self, id: u32) -> &mut CoreCode {
        self.cores.get_mut(&id).expect("allocated up front")
    }

    fn gmem_alloc(&mut self, len: u64) -> u64 {
        let start = self.gmem_next.div_ceil(8) * 8;
        self.gmem_next = start + len;
        start
    }

    /// Copies `len` bytes from `src` on core `from` to `dst` on core `to`.
    fn transfer(&mut self, from: u32, src: u64, to: u32, dst: u64, len: u64) {
        let size = len as u16;
        match self.spec.transport {
            Transport::SendRecv => {
                let s = self.core(from);
                let rs1 = s.local(src);
                s.code.push(Instruction::Send { rs1, core: to as u16, size, offset: 0 });
                let r = self.core(to);
                let rd = r.local(dst);
                r.code.push(Instruction::Recv { rd, core: from as u16, size, offset: 0 });
            }
            Transport::GlobalMemory => {
                let slot = self.gmem_alloc(len);
                let r = self.core(to);
                let ev = r.events_used;
                r.events_used += 1;
                self.events.push((to, ev));
                let s = self.core(from);
                let (rd, rs1) = (s.global(slot), s.local(src));
                s.code.push(Instruction::St(CopyOperands { rd, rs1, size, offset: Offset::NONE }));
                s.code.push(Instruction::Sync { ev, core: to as u16 });
                let r = self.core(to);
                r.code.push(Instruction::Wait { ev, val: 1 });
                let (rd, rs1) = (r.local(dst), r.global(slot));
                r.code.push(Instruction::Ld(CopyOperands { rd, rs1, size, offset: Offset::NONE }));
            }
        }
    }
}

fn check(spec: &MlpSpec) -> Result<(u8, Vec<Vec<u32>>), LowerError> {
    let layers = spec.layers();
    if layers == 0 {
        return Err(LowerError::EmptyNetwork);
    }
    let mismatch = |layer: usize, what: String| Err(LowerError::ShapeMismatch { layer, what });
    if spec.layer_dims.len() != layers + 1 {
        return mismatch(0, format!("{} dims for {layers} layers", spec.layer_dims.len()));
    }
    for l in 0..layers {
        let (cols, rows) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        if rows == 0 || cols == 0 {
            return mismatch(l, "zero-sized layer".into());
        }
        let w = &spec.weights[l];
        if w.len() != rows || w.iter().any(|r| r.len() != cols) {
            return mismatch(l, format!("weights must be {rows}x{cols}"));
        }
        if spec.biases.get(l).is_none_or(|b| b.len() != rows) {
            return mismatch(l, format!("bias must have {rows} entries"));
        }
    }
    if spec.activations.len() != layers {
        return mismatch(0, format!("{} activations for {layers} layers", spec.activations.len()));
    }
    if spec.core_assignment.len() != layers {
        return mismatch(0, format!("{} placements for {layers} layers", spec.core_assignment.len()));
    }
    if !spec.widths.is_empty() && spec.widths.len() != layers {
        return mismatch(0, format!("{} width pairs for {layers} layers", spec.widths.len()));
    }
    let bits = spec.bits();
    for (l, &(ibiw, obiw)) in spec.widths.iter().enumerate() {
        if ibiw != obiw || ibiw != bits || !(1..=32).contains(&ibiw) {
            return Err(LowerError::WidthUnsupported { layer: l, ibiw, obiw });
        }
    }
    let mut placements = Vec::new();
    for (l, p) in spec.core_assignment.iter().enumerate() {
        let cores = p.cores();
        split_rows(spec.layer_dims[l + 1], cores.len())?;
        for (i, c) in cores.iter().enumerate() {
            if cores[..i].contains(c) {
                return Err(LowerError::DuplicateCore { layer: l, core: *c });
            }
        }
        placements.push(cores);
    }
    Ok((bits, placements))
}

/// Lowers `spec` to a bundle. Global memory holds the input at address 0,
/// then the output, biases and transfer slots.
pub fn lower_mlp(spec: &MlpSpec) -> Result<Lowered, LowerError> {
    let (bits, placements) = check(spec)?;
    let bytes = u64::from(bits.div_ceil(8));
    let layers = spec.layers();
    let dims = &spec.layer_dims;
    let core_count = placements.iter().flatten().max().map_or(1, |m| m + 1);

    let mut lw = Lowering {
        spec,
        cores: (0..core_count).map(|c| (c, CoreCode::new(c))).collect(),
        bytes,
        gmem_next: 0,
        gmem_init: Vec::new(),
        events: Vec::new(),
    };
    let input_addr = lw.gmem_alloc(dims[0] as u64 * bytes);
    let output_addr = lw.gmem_alloc(dims[layers] as u64 * bytes);
    if let Some(x) = &spec.input {
        if x.len() != dims[0] {
            return Err(LowerError::ShapeMismatch {
                layer: 0,
                what: format!("input must have {} entries", dims[0]),
            });
        }
        let (lo, hi) = (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1);
        if let Some(v) = x.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(LowerError::InputOutOfRange { layer: 0, value: *v, bits });
        }
        lw.gmem_init.push(MemInit { address: input_addr, bytes: encode_elements(x, bits) });
    }
    if bits != DEFAULT_BIT_WIDTH && spec.variable_bitwidth {
        for c in lw.cores.values_mut() {
            c.code.push(Instruction::Setbw { ibiw: bits, obiw: bits });
        }
    }

    let mut fragments = Vec::new();
    // (core, address) of the previous layer's full output
    let mut holder: Option<(u32, u64)> = None;
    for l in 0..layers {
        let cols = dims[l] as u64;
        let rows = dims[l + 1];
        let parts = &placements[l];
        let home = parts[0];
        let w = spec.layer_matrix(l);

        // input on every participating core
        let mut inputs = BTreeMap::new();
        match holder {
            None => {
                let c = lw.core(home);
                let dst = c.alloc(format!("layer{l}.input"), cols * bytes, bytes);
                let (rd, rs1) = (c.local(dst), c.global(input_addr));
                let size = (cols * bytes) as u16;
                c.code.push(Instruction::Ld(CopyOperands { rd, rs1, size, offset: Offset::NONE }));
                inputs.insert(home, dst);
                holder = Some((home, dst));
            }
            Some((core, addr)) => {
                inputs.insert(core, addr);
            }
        }
        let (src_core, src_addr) = holder.expect("set above");
        for &p in parts {
            inputs.entry(p).or_insert_with(|| {
                let dst = lw.core(p).alloc(format!("layer{l}.input"), cols * bytes, bytes);
                lw.transfer(src_core, src_addr, p, dst, cols * bytes);
                dst
            });
        }

        let full_out = lw.core(home).alloc(format!("layer{l}.output"), rows as u64 * bytes, bytes);
        let mut gathers = Vec::new();
        for (j, range) in split_rows(rows, parts.len())?.into_iter().enumerate() {
            let p = parts[j];
            let n = range.len() as u64;
            let part_w = Matrix {
                rows: range.len(),
                cols: w.cols,
                data: w.data[range.start * w.cols..range.end * w.cols].to_vec(),
            };
            let bias = &spec.biases[l][range.clone()];
            let zero_bias = bias.iter().all(|b| *b == 0);
            let act = spec.activations[l];
            let fuse = act == Activation::Relu && zero_bias;

            let c = lw.core(p);
            let group = c.add_group(&part_w, spec.crossbar);
            let out = if p == home {
                full_out + range.start as u64 * bytes
            } else {
                c.alloc(format!("layer{l}.part{j}"), n * bytes, bytes)
            };
            let bias_addr = c.alloc(format!("layer{l}.part{j}.bias"), n * bytes, bytes);
            let input = inputs[&p];
            let len = n as u16;
            let (rd, rs1) = (c.local(out), c.local(input));
            c.code.push(Instruction::Mvmul {
                rd,
                rs1,
                mbiw: bits_needed(&part_w.data),
                relu: u8::from(fuse),
                group: group as u16,
            });
            if !zero_bias {
                let values: Vec<i64> = bias.iter().map(|b| i64::from(*b)).collect();
                let encoded = encode_elements(&values, bits);
                let at = {
                    let start = lw.gmem_next.div_ceil(8) * 8;
                    lw.gmem_next = start + encoded.len() as u64;
                    start
                };
                lw.gmem_init.push(MemInit { address: at, bytes: encoded });
                let c = lw.core(p);
                let (rd, rs1) = (c.local(bias_addr), c.global(at));
                c.code.push(Instruction::Ld(CopyOperands {
                    rd,
                    rs1,
                    size: (n * bytes) as u16,
                    offset: Offset::NONE,
                }));
            }
            // local memory is zero at power-up, so a zero bias needs no load
            let c = lw.core(p);
            let (rd, rb) = (c.local(out), c.local(bias_addr));
            c.code.push(Instruction::Vvadd(VecOperands { rd, rs1: rd, rs2: rb, len, offset: Offset::NONE }));
            let unary = UnaryOperands { rd, rs1: rd, len, offset: Offset::NONE };
            match act {
                Activation::None => {}
                Activation::Relu if fuse => {}
                Activation::Relu => c.code.push(Instruction::Vrelu(unary)),
                Activation::Tanh => c.code.push(Instruction::Vtanh(unary)),
                Activation::Sigmoid => c.code.push(Instruction::Vsigm(unary)),
            }
            fragments.push(Fragment { layer: l, core: p, group, rows: range.clone() });
            if p != home {
                gathers.push((p, out, full_out + range.start as u64 * bytes, n * bytes));
            }
        }
        for (p, src, dst, len) in gathers {
            lw.transfer(p, src, home, dst, len);
        }
        holder = Some((home, full_out));

        for c in lw.cores.values() {
            if c.next_free > spec.local_mem_bytes as u64 {
                return Err(LowerError::LayerTooLargeForLocalMemory {
                    layer: l,
                    core: c.id,
                    needed: c.next_free,
                    available: spec.local_mem_bytes,
                });
            }
        }
    }

    let (home, out) = holder.expect("at least one layer");
    let size = (dims[layers] as u64 * lw.bytes) as u16;
    let c = lw.core(home);
    let (rd, rs1) = (c.global(output_addr), c.local(out));
    c.code.push(Instruction::St(CopyOperands { rd, rs1, size, offset: Offset::NONE }));

    let global_mem_bytes = (lw.gmem_next.div_ceil(4096) * 4096).max(4096) as usize;
    let mut bundle = ProgramBundle {
        mode: EncodingMode::Word64,
        cores: Vec::new(),
        global_mem_bytes,
        global_mem_init: lw.gmem_init,
        activation_qformat: spec.qformat,
        variable_bitwidth_supported: spec.variable_bitwidth,
    };
    let mut regions = BTreeMap::new();
    for (id, c) in lw.cores {
        let mut core = CoreConfig::new(id as usize, c.code);
        core.local_mem_bytes = spec.local_mem_bytes;
        core.arrays = c.arrays;
        core.groups = c.groups;
        core.event_register_count = core.event_register_count.max(usize::from(c.events_used));
        if !spec.variable_bitwidth {
            core.initial_ibiw = bits;
            core.initial_obiw = bits;
        }
        regions.insert(id, c.regions);
        bundle.cores.push(core);
    }
    let plan = LoweringPlan {
        bits,
        input_addr,
        input_len: dims[0],
        output_addr,
        output_len: dims[layers],
        regions,
        fragments,
        events: lw.events,
    };
    Ok(Lowered { bundle, plan })
}

/// Reference output of `spec` on `input`, layer by layer through
/// [`crate::oracle::ref_fc_layer`].
pub fn reference_output(spec: &MlpSpec, input: &[i64]) -> Vec<i64> {
    let bits = spec.bits();
    (0..spec.layers()).fold(input.to_vec(), |x, l| {
        let bias: Vec<i64> = spec.biases[l].iter().map(|b| i64::from(*b)).collect();
        crate::oracle::ref_fc_layer(
            &spec.layer_matrix(l),
            &x,
            &bias,
            spec.activations[l],
            bits,
            bits,
            spec.qformat,
        )
    })
}
