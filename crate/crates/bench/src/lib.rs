//! Shared fixtures for the benchmarks.

use pimkit::fuzz::{self, ProgramShape};
use pimkit::{EncodingMode, Instruction, MlpSpec, Placement, ProgramBundle, SourceProgram};

pub const SEED: u64 = 0xbe7c;

pub fn instructions(n: usize, mode: EncodingMode) -> Vec<Instruction> {
    let mut rng = fuzz::rng(SEED);
    (0..n).map(|_| fuzz::random_instruction(&mut rng, mode)).collect()
}

pub fn source(len: usize) -> SourceProgram {
    fuzz::random_source(&mut fuzz::rng(SEED), EncodingMode::Word64, len)
}

pub fn program(cores: usize, body_len: usize) -> ProgramBundle {
    fuzz::random_program(&mut fuzz::rng(SEED), ProgramShape { cores, body_len, mode: EncodingMode::Word64 })
}

/// A `[16, 12, 8, 4]` network with deterministic int8 weights, one layer per core.
pub fn mlp(cores: u32) -> MlpSpec {
    let dims = vec![16, 12, 8, 4];
    let weight = |l: usize, r: usize, c: usize| ((l * 31 + r * 7 + c * 13) % 255) as i32 - 127;
    let weights = (0..3)
        .map(|l| (0..dims[l + 1]).map(|r| (0..dims[l]).map(|c| weight(l, r, c)).collect()).collect())
        .collect();
    let biases = (0..3).map(|l| (0..dims[l + 1]).map(|r| (r as i32 % 5) - 2).collect()).collect();
    let mut spec = MlpSpec::new(dims, weights, biases);
    spec.activations = vec![pimkit::Activation::Relu, pimkit::Activation::Relu, pimkit::Activation::None];
    spec.core_assignment = (0..3).map(|l| Placement::Single(l % cores)).collect();
    spec.input = Some((0..16).map(|i| i * 9 - 70).collect());
    spec
}
