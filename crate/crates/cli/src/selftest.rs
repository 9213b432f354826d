//! Reduced-size fuzz and differential checks, one PASS/FAIL line each.

use std::time::Instant;

use anyhow::Result;

use pimkit::asm::{assemble, disassemble};
use pimkit::fuzz::{self, FuzzRng, ProgramShape};
use pimkit::isa::{decode, encode, EncodingMode, Opcode};
use pimkit::lower::{lower_mlp, reference_output, MlpSpec, Placement, Transport};
use pimkit::manifest::{parse_bundle, serialize_bundle};
use pimkit::oracle::{diff_run, diff_run_with, Activation, DiffOptions};
use pimkit::vm::{Fault, Machine, OverlapMode, VmOptions};

use crate::Exit;

type Check = Result<String, String>;
type CheckFn = fn(&Env) -> Check;

struct Env {
    seed: u64,
    vm: VmOptions,
}

impl Env {
    fn diff_options(&self, overlap: OverlapMode) -> DiffOptions {
        DiffOptions { vm: VmOptions { overlap, ..self.vm }, max_steps: 0 }
    }
}

fn codec_roundtrip(env: &Env) -> Check {
    for mode in [EncodingMode::Word64, EncodingMode::Word32] {
        let mut rng = fuzz::rng(env.seed);
        for i in 0..10_000 {
            let instr = fuzz::random_instruction(&mut rng, mode);
            let back = encode(&instr, mode).and_then(|w| decode(w, mode));
            if back.as_ref() != Ok(&instr) {
                return Err(format!("{mode:?} #{i}: {instr} -> {back:?}"));
            }
        }
    }
    Ok("10000 instructions per mode".into())
}

fn assembler_roundtrip(env: &Env) -> Check {
    let mut rng = fuzz::rng(env.seed);
    for i in 0..1000 {
        let program = fuzz::random_source(&mut rng, EncodingMode::Word64, 30);
        let text = disassemble(&program);
        match assemble(&text) {
            Ok(p) if p.same_code(&program) => {}
            Ok(_) => return Err(format!("program {i} changed after reassembly")),
            Err(d) => return Err(format!("program {i}: {}", d[0])),
        }
    }
    Ok("1000 programs".into())
}

fn bundle_roundtrip(env: &Env) -> Check {
    let mut rng = fuzz::rng(env.seed);
    for i in 0..100 {
        let shape = ProgramShape { cores: 1 + i % 3, body_len: 40, mode: EncodingMode::Word64 };
        let bundle = fuzz::random_program(&mut rng, shape);
        if parse_bundle(&serialize_bundle(&bundle)).as_ref() != Ok(&bundle) {
            return Err(format!("bundle {i} changed after reparsing"));
        }
    }
    Ok("100 bundles".into())
}

fn opcode_differential(env: &Env) -> Check {
    let cases = 500;
    let failures: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = Opcode::ALL
            .iter()
            .map(|&op| {
                s.spawn(move || {
                    let mut rng = fuzz::rng(env.seed ^ (u64::from(op.bits()) << 32));
                    for i in 0..cases {
                        let case = fuzz::op_case(&mut rng, op);
                        let overlap = if i % 2 == 0 { OverlapMode::Strict } else { OverlapMode::Permissive };
                        let report =
                            diff_run_with(&case.bundle, env.diff_options(overlap), |m| case.apply(m))
                                .map_err(|e| format!("{op} case {i}: {e}"))?;
                        if let Some(d) = report.divergence {
                            return Err(format!(
                                "{op} case {i} `{}`: {} expected {} got {}",
                                case.instruction(),
                                d.field,
                                d.expected,
                                d.actual
                            ));
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().filter_map(|h| h.join().expect("worker panicked").err()).collect()
    });
    match failures.first() {
        None => Ok(format!("{} opcodes x {cases} cases", Opcode::ALL.len())),
        Some(first) => Err(format!("{} opcode(s) diverged, first: {first}", failures.len())),
    }
}

fn program_differential(env: &Env) -> Check {
    for i in 0..100u64 {
        let mut rng = fuzz::rng(env.seed.wrapping_add(i));
        let cores = 1 + (i as usize % 4);
        let mode = if i % 5 == 0 { EncodingMode::Word32 } else { EncodingMode::Word64 };
        let bundle = fuzz::random_program(&mut rng, ProgramShape { cores, body_len: 150, mode });
        let overlap = if i % 2 == 0 { OverlapMode::Strict } else { OverlapMode::Permissive };
        let report = diff_run(&bundle, env.diff_options(overlap)).map_err(|e| e.to_string())?;
        if let Some(d) = report.divergence {
            return Err(format!("program {i}: step {} core {} pc {}: {}", d.step, d.core, d.pc, d.field));
        }
    }
    Ok("100 programs on 1-4 cores".into())
}

fn random_mlp(rng: &mut FuzzRng) -> (MlpSpec, Vec<i64>) {
    use rand::Rng;
    let layers = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(2..=12)).collect();
    let weights = (0..layers)
        .map(|l| {
            (0..dims[l + 1]).map(|_| (0..dims[l]).map(|_| rng.random_range(-128..=127)).collect()).collect()
        })
        .collect();
    let biases =
        (0..layers).map(|l| (0..dims[l + 1]).map(|_| rng.random_range(-20..=20)).collect()).collect();
    let mut spec = MlpSpec::new(dims.clone(), weights, biases);
    spec.activations =
        (0..layers).map(|l| if l + 1 < layers { Activation::Relu } else { Activation::None }).collect();
    spec.transport = if rng.random_bool(0.5) { Transport::SendRecv } else { Transport::GlobalMemory };
    spec.core_assignment = (0..layers)
        .map(|l| {
            if dims[l + 1] >= 2 && rng.random_bool(0.3) {
                Placement::Split(vec![l as u32, l as u32 + 1])
            } else {
                Placement::Single(l as u32)
            }
        })
        .collect();
    let x = (0..dims[0]).map(|_| rng.random_range(-128..=127)).collect();
    (spec, x)
}

fn lowered_mlp(env: &Env) -> Check {
    let mut rng = fuzz::rng(env.seed);
    for i in 0..100 {
        let (spec, x) = random_mlp(&mut rng);
        let lowered = lower_mlp(&spec).map_err(|e| format!("network {i}: {e}"))?;
        let mut m = Machine::load_with(&lowered.bundle, env.vm).map_err(|e| format!("network {i}: {e}"))?;
        lowered.plan.write_input(m.gmem_mut(), &x);
        if let Some(t) = m.run(1_000_000).trap() {
            return Err(format!("network {i}: {t}"));
        }
        let (got, want) = (lowered.plan.read_output(m.gmem()), reference_output(&spec, &x));
        if got != want {
            return Err(format!("network {i}: output {got:?}, oracle {want:?}"));
        }
    }
    Ok("100 lowered networks".into())
}

fn determinism(env: &Env) -> Check {
    let vm = VmOptions { keep_trace: true, ..env.vm };
    for i in 0..10u64 {
        let bundle = fuzz::random_program(
            &mut fuzz::rng(env.seed.wrapping_add(i)),
            ProgramShape { cores: 3, body_len: 120, mode: EncodingMode::Word64 },
        );
        let run = || {
            let mut m = Machine::load_with(&bundle, vm).expect("generated bundles are valid");
            let r = m.run(1_000_000);
            (m.trace().to_vec(), r, m.gmem_digest())
        };
        if run() != run() {
            return Err(format!("bundle {i} ran differently twice"));
        }
    }
    Ok("10 multi-core bundles".into())
}

pub fn run(inject_fault: bool) -> Result<()> {
    let env = Env {
        seed: fuzz::seed_from_env(0x5e1f),
        vm: VmOptions { fault: inject_fault.then_some(Fault::VvaddOffByOne), ..VmOptions::default() },
    };
    let checks: [(&str, CheckFn); 7] = [
        ("codec roundtrip", codec_roundtrip),
        ("assembler roundtrip", assembler_roundtrip),
        ("bundle roundtrip", bundle_roundtrip),
        ("per-opcode differential", opcode_differential),
        ("program differential", program_differential),
        ("lowered MLP vs oracle", lowered_mlp),
        ("determinism", determinism),
    ];
    println!("seed {:#x}", env.seed);
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        match check(&env) {
            Ok(detail) => println!("PASS {name}: {detail} in {:.2?}", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} checks failed", checks.len());
        return Err(Exit(2).into());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
