//! Program bundles: per-core code plus the array-group weight mapping, memory
//! sizes and activation format, stored as a `.pimbundle.json` manifest.
//!
//! Weights are either inline (`"weights": [[1, 0], [0, 1]]`) or an external
//! `.wbin` file of little-endian `i32` values in row-major order
//! (`"weights_file": "layer0.wbin"`, resolved relative to the manifest).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asm;
use crate::isa::{self, EncodingMode, Instruction, Limits};

pub const DEFAULT_LOCAL_MEM_BYTES: usize = 262_144;
pub const DEFAULT_GLOBAL_MEM_BYTES: usize = 16_777_216;
pub const DEFAULT_BIT_WIDTH: u8 = 8;

/// Row-major dense integer matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<i32>]) -> Matrix {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<i32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalArray {
    pub array_id: usize,
    pub weights: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub array_id: usize,
    pub row_offset: usize,
    pub col_offset: usize,
}

/// A set of arrays acting as one `total_rows x total_cols` matrix operand.
/// `mvmul` reads `total_cols` input elements and writes `total_rows` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGroup {
    pub group_id: usize,
    pub total_rows: usize,
    pub total_cols: usize,
    pub tiles: Vec<Tile>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreConfig {
    pub core_id: usize,
    pub code: Vec<Instruction>,
    pub local_mem_bytes: usize,
    pub event_register_count: usize,
    pub arrays: Vec<LogicalArray>,
    pub groups: Vec<ArrayGroup>,
    pub initial_ibiw: u8,
    pub initial_obiw: u8,
}

impl CoreConfig {
    pub fn new(core_id: usize, code: Vec<Instruction>) -> CoreConfig {
        CoreConfig {
            core_id,
            code,
            local_mem_bytes: DEFAULT_LOCAL_MEM_BYTES,
            event_register_count: isa::DEFAULT_EVENT_REGISTERS,
            arrays: Vec::new(),
            groups: Vec::new(),
            initial_ibiw: DEFAULT_BIT_WIDTH,
            initial_obiw: DEFAULT_BIT_WIDTH,
        }
    }

    /// Adds `weights` as a new array forming a new single-tile group and
    /// returns the group id.
    pub fn add_matrix_group(&mut self, weights: Matrix) -> usize {
        let array_id = self.arrays.len();
        let group_id = self.groups.len();
        self.groups.push(ArrayGroup {
            group_id,
            total_rows: weights.rows,
            total_cols: weights.cols,
            tiles: vec![Tile { array_id, row_offset: 0, col_offset: 0 }],
        });
        self.arrays.push(LogicalArray { array_id, weights });
        group_id
    }

    /// Scatters the group's tiles into its full matrix.
    pub fn group_matrix(&self, group_id: usize) -> Result<Matrix, ManifestError> {
        let group = self.groups.get(group_id).ok_or(ManifestError::UnknownGroup(group_id))?;
        let mut out = Matrix::zeros(group.total_rows, group.total_cols);
        for tile in &group.tiles {
            let array = self.arrays.get(tile.array_id).ok_or(ManifestError::UnknownArray(tile.array_id))?;
            let w = &array.weights;
            for r in 0..w.rows {
                let dst = (tile.row_offset + r) * out.cols + tile.col_offset;
                out.data[dst..dst + w.cols].copy_from_slice(w.row(r));
            }
        }
        Ok(out)
    }
}

/// Fixed-point interpretation of activation inputs and outputs
/// (`value = integer / 2^frac`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormat {
    pub frac_in: u32,
    pub frac_out: u32,
}

impl QFormat {
    /// The configured format, or `biw - 2` fractional bits on each side.
    pub fn resolve(configured: Option<QFormat>, ibiw: u8, obiw: u8) -> QFormat {
        configured.unwrap_or(QFormat {
            frac_in: u32::from(ibiw.saturating_sub(2)),
            frac_out: u32::from(obiw.saturating_sub(2)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemInit {
    pub address: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramBundle {
    pub mode: EncodingMode,
    pub cores: Vec<CoreConfig>,
    pub global_mem_bytes: usize,
    pub global_mem_init: Vec<MemInit>,
    pub activation_qformat: Option<QFormat>,
    pub variable_bitwidth_supported: bool,
}

impl Default for ProgramBundle {
    fn default() -> Self {
        ProgramBundle {
            mode: EncodingMode::Word64,
            cores: Vec::new(),
            global_mem_bytes: DEFAULT_GLOBAL_MEM_BYTES,
            global_mem_init: Vec::new(),
            activation_qformat: None,
            variable_bitwidth_supported: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("unknown array group {0}")]
    UnknownGroup(usize),
    #[error("unknown logical array {0}")]
    UnknownArray(usize),
}

/// One validation or parse problem, located by a JSON path such as
/// `cores[0].groups[1].tiles[2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for BundleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleErrors(pub Vec<BundleError>);

impl fmt::Display for BundleErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for BundleErrors {}

impl ProgramBundle {
    /// Checks every structural and cross-reference rule of the bundle.
    pub fn validate(&self) -> Result<(), BundleErrors> {
        let mut errs = Vec::new();
        let mut push = |path: String, message: String| errs.push(BundleError { path, message });

        for (i, init) in self.global_mem_init.iter().enumerate() {
            let end = init.address.checked_add(init.bytes.len() as u64);
            if end.is_none_or(|e| e > self.global_mem_bytes as u64) {
                push(
                    format!("global_mem_init[{i}]"),
                    format!(
                        "range {:#x}+{} exceeds global memory of {} bytes",
                        init.address,
                        init.bytes.len(),
                        self.global_mem_bytes
                    ),
                );
            }
        }

        for (ci, core) in self.cores.iter().enumerate() {
            let at = |rest: &str| format!("cores[{ci}]{rest}");
            if core.core_id != ci {
                push(at(".core_id"), format!("core ids must be dense from 0, found {}", core.core_id));
            }
            for (field, w) in [("initial_ibiw", core.initial_ibiw), ("initial_obiw", core.initial_obiw)] {
                if w == 0 || w > isa::MAX_BIT_WIDTH {
                    push(at(&format!(".{field}")), format!("bit-width {w} outside 1..=32"));
                }
            }
            for (ai, array) in core.arrays.iter().enumerate() {
                if array.array_id != ai {
                    push(
                        at(&format!(".arrays[{ai}].array_id")),
                        format!("array ids must be dense from 0, found {}", array.array_id),
                    );
                }
                let w = &array.weights;
                if w.rows == 0 || w.cols == 0 {
                    push(at(&format!(".arrays[{ai}]")), "arrays need at least one row and column".into());
                }
                if w.data.len() != w.rows * w.cols {
                    push(
                        at(&format!(".arrays[{ai}].weights")),
                        format!("expected {}x{} weights, found {}", w.rows, w.cols, w.data.len()),
                    );
                }
            }
            for (gi, group) in core.groups.iter().enumerate() {
                let gpath = at(&format!(".groups[{gi}]"));
                if group.group_id != gi {
                    push(
                        format!("{gpath}.group_id"),
                        format!("group ids must be dense from 0, found {}", group.group_id),
                    );
                }
                if let Err(message) = check_tiling(core, group) {
                    push(format!("{gpath}.tiles"), message);
                }
            }

            let limits = Limits { event_registers: core.event_register_count };
            for (pc, instr) in core.code.iter().enumerate() {
                let ipath = at(&format!(".code[{pc}]"));
                for v in isa::validate_with(instr, &limits) {
                    push(ipath.clone(), format!("{instr}: {v}"));
                }
                if let Err(e) = isa::encode(instr, self.mode) {
                    push(ipath.clone(), format!("{instr}: not encodable in {:?}: {e}", self.mode));
                }
                if !self.variable_bitwidth_supported && instr.opcode().needs_variable_bitwidth() {
                    push(
                        ipath.clone(),
                        format!("{} is invalid on hardware without variable bit-width", instr.mnemonic()),
                    );
                }
                match *instr {
                    Instruction::Mvmul { mbiw, group, .. } => {
                        let group = usize::from(group);
                        match core.groups.get(group) {
                            None => push(ipath.clone(), format!("mvmul references unknown group {group}")),
                            Some(g) => {
                                let bound = 1i64 << (mbiw.clamp(1, 32) - 1);
                                for tile in &g.tiles {
                                    let Some(array) = core.arrays.get(tile.array_id) else { continue };
                                    if let Some(w) = array
                                        .weights
                                        .data
                                        .iter()
                                        .find(|w| !(-bound..bound).contains(&i64::from(**w)))
                                    {
                                        push(
                                            ipath.clone(),
                                            format!(
                                                "weight {w} in array {} does not fit mbiw={mbiw}",
                                                tile.array_id
                                            ),
                                        );
                                    }
                                }
                            }
                        }
                    }
                    Instruction::Send { core: peer, .. } | Instruction::Recv { core: peer, .. } => {
                        let peer = usize::from(peer);
                        if peer >= self.cores.len() {
                            push(ipath.clone(), format!("{} names unknown core {peer}", instr.mnemonic()));
                        } else if peer == ci {
                            push(ipath.clone(), format!("{} cannot target its own core", instr.mnemonic()));
                        }
                    }
                    Instruction::Sync { ev, core: target } => match self.cores.get(usize::from(target)) {
                        None => push(ipath.clone(), format!("sync names unknown core {target}")),
                        Some(t) if usize::from(ev) >= t.event_register_count => push(
                            ipath.clone(),
                            format!(
                                "sync event {ev} exceeds core {target}'s {} event registers",
                                t.event_register_count
                            ),
                        ),
                        Some(_) => {}
                    },
                    _ => {}
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(BundleErrors(errs))
        }
    }
}

fn check_tiling(core: &CoreConfig, group: &ArrayGroup) -> Result<(), String> {
    if group.total_rows == 0 || group.total_cols == 0 {
        return Err("group must be at least 1x1".into());
    }
    let mut owner = vec![usize::MAX; group.total_rows * group.total_cols];
    for (ti, tile) in group.tiles.iter().enumerate() {
        let array = core
            .arrays
            .get(tile.array_id)
            .ok_or_else(|| format!("tile {ti} references unknown array {}", tile.array_id))?;
        let (rows, cols) = (array.weights.rows, array.weights.cols);
        if tile.row_offset + rows > group.total_rows || tile.col_offset + cols > group.total_cols {
            return Err(format!(
                "tile {ti} ({rows}x{cols} at {},{}) exceeds the {}x{} group",
                tile.row_offset, tile.col_offset, group.total_rows, group.total_cols
            ));
        }
        for r in tile.row_offset..tile.row_offset + rows {
            for c in tile.col_offset..tile.col_offset + cols {
                let cell = &mut owner[r * group.total_cols + c];
                if *cell != usize::MAX {
                    return Err(format!("tiles {} and {ti} overlap at ({r},{c})", *cell));
                }
                *cell = ti;
            }
        }
    }
    if let Some(gap) = owner.iter().position(|o| *o == usize::MAX) {
        return Err(format!(
            "cell ({},{}) is not covered by any tile",
            gap / group.total_cols,
            gap % group.total_cols
        ));
    }
    Ok(())
}

// On-disk representation.

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeTag {
    Word64,
    Word32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    #[serde(default = "default_mode")]
    mode: ModeTag,
    #[serde(default = "default_global_mem")]
    global_mem_bytes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    global_mem_init: Vec<MemInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation_qformat: Option<QFormat>,
    #[serde(default = "default_true")]
    variable_bitwidth_supported: bool,
    cores: Vec<CoreFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoreFile {
    core_id: usize,
    #[serde(default = "default_local_mem")]
    local_mem_bytes: usize,
    #[serde(default = "default_events")]
    event_register_count: usize,
    #[serde(default = "default_width")]
    initial_ibiw: u8,
    #[serde(default = "default_width")]
    initial_obiw: u8,
    #[serde(default)]
    arrays: Vec<ArrayFile>,
    #[serde(default)]
    groups: Vec<ArrayGroup>,
    #[serde(default)]
    code: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayFile {
    array_id: usize,
    rows: usize,
    cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<i32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_file: Option<String>,
}

fn default_mode() -> ModeTag {
    ModeTag::Word64
}
fn default_global_mem() -> usize {
    DEFAULT_GLOBAL_MEM_BYTES
}
fn default_local_mem() -> usize {
    DEFAULT_LOCAL_MEM_BYTES
}
fn default_events() -> usize {
    isa::DEFAULT_EVENT_REGISTERS
}
fn default_width() -> u8 {
    DEFAULT_BIT_WIDTH
}
fn default_true() -> bool {
    true
}

/// Parses and validates a manifest. External weight files are not allowed;
/// use [`parse_bundle_in`] for manifests that reference them.
pub fn parse_bundle(bytes: &[u8]) -> Result<ProgramBundle, BundleErrors> {
    parse_bundle_in(bytes, None)
}

/// Parses a manifest, resolving `weights_file` entries against `base_dir`.
pub fn parse_bundle_in(bytes: &[u8], base_dir: Option<&Path>) -> Result<ProgramBundle, BundleErrors> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: BundleFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        BundleErrors(vec![BundleError {
            path: if path == "." { String::new() } else { path },
            message: e.into_inner().to_string(),
        }])
    })?;

    let mut errs = Vec::new();
    let mut cores = Vec::with_capacity(file.cores.len());
    for (ci, core) in file.cores.into_iter().enumerate() {
        let limits = Limits { event_registers: core.event_register_count };
        let mut code = Vec::with_capacity(core.code.len());
        for (pc, line) in core.code.iter().enumerate() {
            match asm::parse_instruction_with(line, &limits) {
                Ok(i) => code.push(i),
                Err(e) => errs.push(BundleError {
                    path: format!("cores[{ci}].code[{pc}]"),
                    message: format!("`{line}`: {}", e.message),
                }),
            }
        }
        let mut arrays = Vec::with_capacity(core.arrays.len());
        for (ai, array) in core.arrays.into_iter().enumerate() {
            let path = format!("cores[{ci}].arrays[{ai}]");
            match load_weights(&array, base_dir) {
                Ok(weights) => arrays.push(LogicalArray { array_id: array.array_id, weights }),
                Err(message) => errs.push(BundleError { path, message }),
            }
        }
        cores.push(CoreConfig {
            core_id: core.core_id,
            code,
            local_mem_bytes: core.local_mem_bytes,
            event_register_count: core.event_register_count,
            arrays,
            groups: core.groups,
            initial_ibiw: core.initial_ibiw,
            initial_obiw: core.initial_obiw,
        });
    }
    if !errs.is_empty() {
        return Err(BundleErrors(errs));
    }
    let bundle = ProgramBundle {
        mode: match file.mode {
            ModeTag::Word64 => EncodingMode::Word64,
            ModeTag::Word32 => EncodingMode::Word32,
        },
        cores,
        global_mem_bytes: file.global_mem_bytes,
        global_mem_init: file.global_mem_init,
        activation_qformat: file.activation_qformat,
        variable_bitwidth_supported: file.variable_bitwidth_supported,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Reads a manifest from disk, resolving weight files next to it.
pub fn load_bundle(path: &Path) -> Result<ProgramBundle, BundleErrors> {
    let bytes = std::fs::read(path).map_err(|e| {
        BundleErrors(vec![BundleError { path: String::new(), message: format!("{}: {e}", path.display()) }])
    })?;
    parse_bundle_in(&bytes, path.parent())
}

fn load_weights(array: &ArrayFile, base_dir: Option<&Path>) -> Result<Matrix, String> {
    let (rows, cols) = (array.rows, array.cols);
    match (&array.weights, &array.weights_file) {
        (Some(_), Some(_)) => Err("give either `weights` or `weights_file`, not both".into()),
        (None, None) => Err("missing `weights` or `weights_file`".into()),
        (Some(inline), None) => {
            if inline.len() != rows || inline.iter().any(|r| r.len() != cols) {
                return Err(format!("inline weights do not match the declared {rows}x{cols} shape"));
            }
            Ok(Matrix { rows, cols, data: inline.concat() })
        }
        (None, Some(file)) => {
            let base = base_dir.ok_or("external weight files need a manifest directory")?;
            let bytes = std::fs::read(base.join(file)).map_err(|e| format!("{file}: {e}"))?;
            let data = read_wbin(&bytes).map_err(|e| format!("{file}: {e}"))?;
            if data.len() != rows * cols {
                return Err(format!("{file}: expected {} weights, found {}", rows * cols, data.len()));
            }
            Ok(Matrix { rows, cols, data })
        }
    }
}

/// Decodes a `.wbin` weight file: little-endian `i32`, row-major.
pub fn read_wbin(bytes: &[u8]) -> Result<Vec<i32>, String> {
    if !bytes.len().is_multiple_of(4) {
        return Err(format!("length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_wbin(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes a bundle as pretty JSON with inline weights and canonical
/// assembly for each instruction.
pub fn serialize_bundle(bundle: &ProgramBundle) -> Vec<u8> {
    let file = BundleFile {
        mode: match bundle.mode {
            EncodingMode::Word64 => ModeTag::Word64,
            EncodingMode::Word32 => ModeTag::Word32,
        },
        global_mem_bytes: bundle.global_mem_bytes,
        global_mem_init: bundle.global_mem_init.clone(),
        activation_qformat: bundle.activation_qformat,
        variable_bitwidth_supported: bundle.variable_bitwidth_supported,
        cores: bundle
            .cores
            .iter()
            .map(|core| CoreFile {
                core_id: core.core_id,
                local_mem_bytes: core.local_mem_bytes,
                event_register_count: core.event_register_count,
                initial_ibiw: core.initial_ibiw,
                initial_obiw: core.initial_obiw,
                arrays: core
                    .arrays
                    .iter()
                    .map(|a| ArrayFile {
                        array_id: a.array_id,
                        rows: a.weights.rows,
                        cols: a.weights.cols,
                        weights: Some(a.weights.to_rows()),
                        weights_file: None,
                    })
                    .collect(),
                groups: core.groups.clone(),
                code: core.code.iter().map(Instruction::to_string).collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("bundle serialization cannot fail");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Reg;

    const MINIMAL: &str = r#"{
        "cores": [{
            "core_id": 0,
            "arrays": [{"array_id": 0, "rows": 2, "cols": 2, "weights": [[1, 0], [0, 1]]}],
            "groups": [{"group_id": 0, "total_rows": 2, "total_cols": 2,
                        "tiles": [{"array_id": 0, "row_offset": 0, "col_offset": 0}]}],
            "code": ["mvmul $r1, $r2, 8, 0, 0"]
        }]
    }"#;

    #[test]
    fn minimal_bundle_parses_with_defaults() {
        let b = parse_bundle(MINIMAL.as_bytes()).unwrap();
        assert_eq!(b.mode, EncodingMode::Word64);
        assert_eq!(b.global_mem_bytes, DEFAULT_GLOBAL_MEM_BYTES);
        let core = &b.cores[0];
        assert_eq!(core.local_mem_bytes, DEFAULT_LOCAL_MEM_BYTES);
        assert_eq!(core.event_register_count, 16);
        assert_eq!((core.initial_ibiw, core.initial_obiw), (8, 8));
        let m = core.group_matrix(0).unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        assert_eq!(m.to_rows(), vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn overlapping_tiles_are_rejected() {
        let text = MINIMAL.replace(
            r#""tiles": [{"array_id": 0, "row_offset": 0, "col_offset": 0}]"#,
            r#""tiles": [{"array_id": 0, "row_offset": 0, "col_offset": 0},
                         {"array_id": 0, "row_offset": 0, "col_offset": 0}]"#,
        );
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert_eq!(errs.0[0].path, "cores[0].groups[0].tiles");
        assert!(errs.0[0].message.contains("overlap at (0,0)"));
    }

    #[test]
    fn gaps_are_rejected() {
        let text = MINIMAL.replace(r#""total_cols": 2,"#, r#""total_cols": 3,"#);
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert!(errs.0[0].message.contains("not covered"), "{errs}");
    }

    #[test]
    fn setbw_needs_variable_bitwidth_hardware() {
        let text = MINIMAL
            .replace(r#""cores""#, r#""variable_bitwidth_supported": false, "cores""#)
            .replace(r#""code": ["#, r#""code": ["setbw 8, 16", "#);
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert_eq!(errs.0[0].path, "cores[0].code[0]");
        assert!(errs.0[0].message.contains("variable bit-width"));
    }

    #[test]
    fn weights_must_fit_mbiw() {
        let text = MINIMAL.replace("[[1, 0], [0, 1]]", "[[1, 0], [0, 200]]");
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert!(errs.0[0].message.contains("does not fit mbiw=8"), "{errs}");
    }

    #[test]
    fn unknown_group_and_self_send() {
        let text =
            MINIMAL.replace("mvmul $r1, $r2, 8, 0, 0", "mvmul $r1, $r2, 8, 0, 3\", \"send $r2, 0, 4, 0");
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert_eq!(errs.0.len(), 2);
        assert!(errs.0[0].message.contains("unknown group 3"));
        assert!(errs.0[1].message.contains("own core"));
    }

    #[test]
    fn malformed_json_reports_a_path() {
        let text = MINIMAL.replace(r#""rows": 2"#, r#""rows": "two""#);
        let errs = parse_bundle(text.as_bytes()).unwrap_err();
        assert_eq!(errs.0[0].path, "cores[0].arrays[0].rows");
    }

    #[test]
    fn side_by_side_tiles() {
        let mut core = CoreConfig::new(0, vec![]);
        let a = Matrix::from_rows(&[vec![1, 2], vec![3, 4]]);
        let b = Matrix::from_rows(&[vec![5, 6], vec![7, 8]]);
        core.arrays.push(LogicalArray { array_id: 0, weights: a });
        core.arrays.push(LogicalArray { array_id: 1, weights: b });
        core.groups.push(ArrayGroup {
            group_id: 0,
            total_rows: 2,
            total_cols: 4,
            tiles: vec![
                Tile { array_id: 0, row_offset: 0, col_offset: 0 },
                Tile { array_id: 1, row_offset: 0, col_offset: 2 },
            ],
        });
        assert_eq!(core.group_matrix(0).unwrap().to_rows(), vec![vec![1, 2, 5, 6], vec![3, 4, 7, 8]]);
        assert_eq!(core.group_matrix(1), Err(ManifestError::UnknownGroup(1)));
    }

    #[test]
    fn serialization_roundtrip_is_exact_and_stable() {
        let b = parse_bundle(MINIMAL.as_bytes()).unwrap();
        let once = serialize_bundle(&b);
        assert_eq!(once, serialize_bundle(&b));
        assert_eq!(parse_bundle(&once).unwrap(), b);
    }

    #[test]
    fn external_weight_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("w.wbin"), write_wbin(&[1, 0, 0, -1])).unwrap();
        let text = MINIMAL.replace(r#""weights": [[1, 0], [0, 1]]"#, r#""weights_file": "w.wbin""#);
        let path = dir.path().join("b.pimbundle.json");
        std::fs::write(&path, text).unwrap();
        let b = load_bundle(&path).unwrap();
        assert_eq!(b.cores[0].arrays[0].weights.data, vec![1, 0, 0, -1]);
        assert!(parse_bundle(&std::fs::read(&path).unwrap()).is_err());
    }

    #[test]
    fn word32_bundle_rejects_offsets() {
        let mut b = ProgramBundle { mode: EncodingMode::Word32, ..Default::default() };
        b.cores.push(CoreConfig::new(0, vec![Instruction::Sld { rd: Reg::r(1), rs1: Reg::r(2), offset: 4 }]));
        let errs = b.validate().unwrap_err();
        assert!(errs.0[0].message.contains("not encodable"));
    }
}
