//! Toolchain for a processing-in-memory DNN accelerator ISA: instruction
//! codec, assembler, program bundles, a functional simulator, a reference
//! oracle for differential testing, and a lowering pass for small MLPs.

pub mod asm;
pub mod fuzz;
pub mod isa;
pub mod lower;
pub mod manifest;
pub mod oracle;
pub mod vm;

pub use asm::{assemble, disassemble, AsmDiagnostic, SourceProgram};
pub use isa::{decode, encode, EncodingMode, Instruction, IsaError, Offset, Opcode, Reg};
pub use lower::{lower_mlp, LowerError, Lowered, LoweringPlan, MlpSpec, Placement, Transport};
pub use manifest::{
    load_bundle, parse_bundle, serialize_bundle, BundleErrors, CoreConfig, Matrix, ProgramBundle,
};
pub use oracle::{diff_run, Activation, DiffOptions, DiffReport};
pub use vm::{Machine, OverlapMode, RunResult, Trap, TrapKind, VmOptions};
