//! `pimkit` command-line driver.
//!
//! Exit status: 0 on success, 1 on user error (bad arguments, unreadable or
//! invalid input), 2 when a program traps or the simulator and the oracle
//! disagree.

mod selftest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pimkit::asm::{assemble, disassemble, Section, SourceProgram};
use pimkit::fuzz::{self, ProgramShape};
use pimkit::isa::{encode, read_stream, write_stream, EncodingMode};
use pimkit::lower::{lower_mlp, MlpSpec};
use pimkit::manifest::{load_bundle, serialize_bundle, CoreConfig, ProgramBundle};
use pimkit::oracle::{diff_run, DiffOptions, DiffReport};
use pimkit::vm::{Machine, OverlapMode, VmOptions};

#[derive(Parser)]
#[command(name = "pimkit", version, about = "Toolchain for a processing-in-memory DNN accelerator ISA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a .pasm file into PIMI instruction streams.
    Asm(AsmArgs),
    /// Disassemble PIMI streams back to assembly text.
    Disasm(DisasmArgs),
    /// Run a program bundle on the simulator.
    Run(RunArgs),
    /// Lower an MLP description to a program bundle.
    GenMlp(GenMlpArgs),
    /// Run the simulator in lockstep with the reference oracle.
    Diff(DiffArgs),
    /// Run the built-in fuzz and differential checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "64")]
    W64,
    #[value(name = "32")]
    W32,
}

impl From<ModeArg> for EncodingMode {
    fn from(m: ModeArg) -> EncodingMode {
        match m {
            ModeArg::W64 => EncodingMode::Word64,
            ModeArg::W32 => EncodingMode::Word32,
        }
    }
}

#[derive(Args)]
struct AsmArgs {
    input: PathBuf,
    /// Output stream. Multi-section sources write `<stem>.core<N>.bin` next to it.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "64")]
    mode: ModeArg,
    /// Also write a bundle manifest holding the assembled code.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct DisasmArgs {
    /// One stream per core, in core order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OverlapArgs {
    /// Trap on undefined overlapping moves (default).
    #[arg(long, conflicts_with = "permissive_overlap")]
    strict_overlap: bool,
    /// Copy overlapping moves through a temporary instead of trapping.
    #[arg(long)]
    permissive_overlap: bool,
}

impl OverlapArgs {
    fn mode(&self) -> OverlapMode {
        if self.permissive_overlap {
            OverlapMode::Permissive
        } else {
            OverlapMode::Strict
        }
    }
}

#[derive(Args)]
struct RunArgs {
    bundle: PathBuf,
    /// Write the execution trace, one tab-separated line per instruction.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write run statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000_000)]
    max_steps: u64,
    #[command(flatten)]
    overlap: OverlapArgs,
    /// Print `LEN` bytes of global memory at `ADDR` as hex, e.g. `0:16`.
    #[arg(long, value_name = "ADDR:LEN")]
    dump: Vec<String>,
}

#[derive(Args)]
struct GenMlpArgs {
    spec: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Write the memory plan (addresses, regions, fragments) as JSON.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    /// Bundle to check; omit with --fuzz.
    #[arg(required_unless_present = "fuzz", conflicts_with = "fuzz")]
    bundle: Option<PathBuf>,
    /// Check this many generated programs instead; seeds start at PIMKIT_SEED.
    #[arg(long, value_name = "COUNT")]
    fuzz: Option<u64>,
    #[arg(long, default_value_t = 2)]
    cores: usize,
    #[arg(long, default_value_t = 200)]
    body_len: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 10_000_000)]
    max_steps: u64,
    #[command(flatten)]
    overlap: OverlapArgs,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Failure with a specific exit status.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Asm(a) => cmd_asm(&a),
        Command::Disasm(a) => cmd_disasm(&a),
        Command::Run(a) => cmd_run(&a),
        Command::GenMlp(a) => cmd_gen_mlp(&a),
        Command::Diff(a) => cmd_diff(&a),
        Command::Selftest(a) => selftest::run(a.inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<ProgramBundle> {
    load_bundle(path).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn cmd_asm(args: &AsmArgs) -> Result<()> {
    let text = read_text(&args.input)?;
    let name = args.input.display();
    let program = assemble(&text).map_err(|diags| {
        for d in &diags {
            eprintln!("{name}:{d}");
        }
        anyhow!("{} error(s) in {name}", diags.len())
    })?;
    let mode = EncodingMode::from(args.mode);
    let mut failed = 0;
    for section in &program.sections {
        for (i, instr) in section.instructions.iter().enumerate() {
            if let Err(e) = encode(instr, mode) {
                failed += 1;
                eprintln!("{name}:{}: error: `{instr}`: {e}", section.source_lines[i]);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} instruction(s) cannot be encoded in {}-bit mode", mode.word_bytes() * 8);
    }

    let output = args.output.clone().unwrap_or_else(|| args.input.with_extension("bin"));
    let sections: Vec<&Section> = program.sections.iter().collect();
    for section in &sections {
        let path = if sections.len() == 1 { output.clone() } else { per_core_path(&output, section.core_id) };
        write_file(&path, &write_stream(&section.instructions, mode)?)?;
        println!("{}: {} instructions", path.display(), section.instructions.len());
    }
    if let Some(path) = &args.bundle {
        let bundle = ProgramBundle {
            mode,
            cores: sections
                .iter()
                .map(|s| CoreConfig::new(s.core_id as usize, s.instructions.clone()))
                .collect(),
            ..ProgramBundle::default()
        };
        write_file(path, &serialize_bundle(&bundle))?;
    }
    Ok(())
}

fn per_core_path(output: &Path, core: u32) -> PathBuf {
    let stem = output.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}.core{core}.bin"))
}

fn cmd_disasm(args: &DisasmArgs) -> Result<()> {
    let mut program = SourceProgram::default();
    for (core, path) in args.inputs.iter().enumerate() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let (_, code) = read_stream(&bytes).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        program.sections.push(Section::new(core as u32, code));
    }
    let text = if program.sections.len() == 1 {
        program.sections[0].instructions.iter().map(|i| format!("{i}\n")).collect()
    } else {
        disassemble(&program)
    };
    match &args.output {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_dump(spec: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        pimkit::asm::parse_int(s.trim())
            .filter(|v| *v >= 0)
            .map(|v| v as usize)
            .ok_or_else(|| anyhow!("bad --dump `{spec}`, expected ADDR:LEN"))
    };
    let (addr, len) =
        spec.split_once(':').ok_or_else(|| anyhow!("bad --dump `{spec}`, expected ADDR:LEN"))?;
    Ok((parse(addr)?, parse(len)?))
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let bundle = load(&args.bundle)?;
    let dumps = args.dump.iter().map(|d| parse_dump(d)).collect::<Result<Vec<_>>>()?;
    let options =
        VmOptions { overlap: args.overlap.mode(), keep_trace: args.trace.is_some(), ..VmOptions::default() };
    let mut machine =
        Machine::load_with(&bundle, options).map_err(|e| anyhow!("{}: {e}", args.bundle.display()))?;
    let result = machine.run(args.max_steps);
    if let Some(path) = &args.trace {
        let mut out = Vec::new();
        for event in machine.trace() {
            writeln!(out, "{event}")?;
        }
        write_file(path, &out)?;
    }
    if let Some(path) = &args.stats {
        write_file(path, &serde_json::to_vec_pretty(&result)?)?;
    }
    println!("steps {}", result.steps);
    println!("gmem digest {:#018x}", machine.gmem_digest());
    for (addr, len) in dumps {
        let bytes = machine
            .gmem()
            .get(addr..addr.saturating_add(len))
            .ok_or_else(|| anyhow!("--dump {addr}:{len} is outside global memory"))?;
        let hex: Vec<String> = bytes.iter().map(|b| format!("{b:02x}")).collect();
        println!("gmem[{addr:#x}..{:#x}] {}", addr + len, hex.join(" "));
    }
    if let Some(trap) = result.trap() {
        eprintln!("{}", serde_json::to_string(trap)?);
        return Err(Exit(2).into());
    }
    Ok(())
}

fn cmd_gen_mlp(args: &GenMlpArgs) -> Result<()> {
    let text = read_text(&args.spec)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: MlpSpec = serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow!("{}: at `{}`: {}", args.spec.display(), e.path(), e.inner()))?;
    let lowered = lower_mlp(&spec).with_context(|| format!("lowering {}", args.spec.display()))?;
    write_file(&args.output, &serialize_bundle(&lowered.bundle))?;
    if let Some(path) = &args.plan {
        write_file(path, &serde_json::to_vec_pretty(&lowered.plan)?)?;
    }
    let code: usize = lowered.bundle.cores.iter().map(|c| c.code.len()).sum();
    println!(
        "{}: {} cores, {code} instructions, input at gmem {:#x}, output at gmem {:#x} ({} x {} bits)",
        args.output.display(),
        lowered.bundle.cores.len(),
        lowered.plan.input_addr,
        lowered.plan.output_addr,
        lowered.plan.output_len,
        lowered.plan.bits,
    );
    Ok(())
}

fn report_line(report: &DiffReport) -> Result<String> {
    Ok(serde_json::to_string(report)?)
}

fn cmd_diff(args: &DiffArgs) -> Result<()> {
    let options = DiffOptions {
        vm: VmOptions { overlap: args.overlap.mode(), ..VmOptions::default() },
        max_steps: args.max_steps,
    };
    if let Some(path) = &args.bundle {
        let bundle = load(path)?;
        let report = diff_run(&bundle, options)?;
        println!("{}", report_line(&report)?);
        return if report.agrees() { Ok(()) } else { Err(Exit(2).into()) };
    }
    let count = args.fuzz.expect("clap requires a bundle or --fuzz");
    if args.cores == 0 {
        bail!("--cores must be at least 1");
    }
    let base = fuzz::seed_from_env(0);
    let threads =
        args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let shape = ProgramShape { cores: args.cores, body_len: args.body_len, mode: EncodingMode::Word64 };
    let mut divergent: Vec<DiffReport> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads as u64)
            .map(|t| {
                s.spawn(move || {
                    let mut bad = Vec::new();
                    for i in (t..count).step_by(threads) {
                        let seed = base.wrapping_add(i);
                        let bundle = fuzz::random_program(&mut fuzz::rng(seed), shape);
                        let mut report = diff_run(&bundle, options).expect("generated bundles are valid");
                        if !report.agrees() {
                            report.seed = Some(seed);
                            bad.push(report);
                        }
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    divergent.sort_by_key(|r| r.seed);
    for report in &divergent {
        println!("{}", report_line(report)?);
    }
    println!("{count} programs, {} divergent", divergent.len());
    if divergent.is_empty() {
        Ok(())
    } else {
        Err(Exit(2).into())
    }
}
