use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pimkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("PIMKIT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const PROGRAM: &str = "\
.core 0
sldi $r2, 16      # source
sldi $r3, 32
ldi $r2, 5, 4, 0
vvadd $r3, $r2, $r2, 4, [0b011:1]
send $r3, 1, 4, 0
.core 1
recv $r0, 0, 4, 0
";

#[test]
fn asm_writes_streams_that_disassemble_to_the_source() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("p.pasm"), PROGRAM).unwrap();
    let out = pimkit(&["asm", "p.pasm", "-o", "p.bin", "--bundle", "p.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for core in [0, 1] {
        let bytes = fs::read(dir.path().join(format!("p.core{core}.bin"))).unwrap();
        assert_eq!(&bytes[..4], b"PIMI");
    }
    let out = pimkit(&["disasm", "p.core0.bin", "p.core1.bin"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("vvadd $r3, $r2, $r2, 4, [0b011:1]"), "{text}");
    assert!(text.contains(".core 1\nrecv $r0, 0, 4, 0"), "{text}");

    let out = pimkit(&["run", "p.json", "--dump", "32:4"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn asm_reports_the_line_of_an_unknown_mnemonic() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.pasm"), "sldi $r1, 1\nfrobnicate $r1\n").unwrap();
    let out = pimkit(&["asm", "bad.pasm"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.pasm:2:"), "{}", stderr(&out));
    assert!(!dir.path().join("bad.bin").exists());
}

#[test]
fn asm_rejects_offsets_in_32_bit_mode() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("o.pasm"), "vvadd $r1, $r2, $r3, 4\nvvadd $r1, $r2, $r3, 4, [0b001:2]\n")
        .unwrap();
    let out = pimkit(&["asm", "o.pasm", "--mode", "32"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("o.pasm:2:") && err.contains("32-bit mode"), "{err}");
    let out = pimkit(&["asm", "o.pasm", "--mode", "64"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

const IDENTITY: &str = r#"{
    "layer_dims": [4, 4],
    "weights": [[[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]],
    "biases": [[0, 0, 0, 0]],
    "activations": ["None"],
    "core_assignment": [0],
    "input": [3, -1, 127, -128]
}"#;

#[test]
fn identity_network_copies_input_to_output() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("id.json"), IDENTITY).unwrap();
    let out = pimkit(&["gen-mlp", "id.json", "-o", "bundle.json", "--plan", "plan.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let plan: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("plan.json")).unwrap()).unwrap();
    let (input, output) = (plan["input_addr"].as_u64().unwrap(), plan["output_addr"].as_u64().unwrap());
    let out = pimkit(
        &["run", "bundle.json", "--dump", &format!("{input}:4"), "--dump", &format!("{output}:4")],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let dumps: Vec<&str> =
        text.lines().filter(|l| l.starts_with("gmem[")).map(|l| l.split_once(' ').unwrap().1).collect();
    assert_eq!(dumps, ["03 ff 7f 80", "03 ff 7f 80"]);
    assert!(text.contains("gmem digest 0x"));
}

#[test]
fn gen_mlp_reports_spec_errors_with_their_path() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), IDENTITY.replace("\"None\"", "\"Swish\"")).unwrap();
    let out = pimkit(&["gen-mlp", "bad.json", "-o", "b.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("activations[0]"), "{}", stderr(&out));
}

const DEADLOCK: &str = r#"{
    "global_mem_bytes": 64,
    "cores": [
        {"core_id": 0, "code": ["send $r0, 1, 4, 0"]},
        {"core_id": 1, "code": ["sldi $r1, 1"]}
    ]
}"#;

#[test]
fn deadlock_exits_2_with_trap_json() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("d.json"), DEADLOCK).unwrap();
    let out = pimkit(&["run", "d.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let trap: serde_json::Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(trap["kind"], "Deadlock");
}

#[test]
fn step_limit_exits_2() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"cores": [{"core_id": 0, "code": ["sldi $r1, 1", "sldi $r2, 2", "sldi $r3, 3"]}]}"#,
    )
    .unwrap();
    let out = pimkit(&["run", "s.json", "--max-steps", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("\"StepLimitExceeded\""), "{}", stderr(&out));
}

#[test]
fn run_writes_trace_and_stats_deterministically() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("p.pasm"), PROGRAM).unwrap();
    assert_eq!(pimkit(&["asm", "p.pasm", "--bundle", "p.json"], dir.path()).status.code(), Some(0));
    let first = pimkit(&["run", "p.json", "--trace", "t1.txt", "--stats", "s1.json"], dir.path());
    let second = pimkit(&["run", "p.json", "--trace", "t2.txt", "--stats", "s2.json"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&second));
    let read = |name: &str| fs::read_to_string(dir.path().join(name)).unwrap();
    assert_eq!(read("t1.txt"), read("t2.txt"));
    assert_eq!(read("s1.json"), read("s2.json"));
    assert!(read("t1.txt").starts_with("0\t0\t0\tsldi $r2, 16\t$r2=0x00000010\n"), "{}", read("t1.txt"));
    let stats: serde_json::Value = serde_json::from_str(&read("s1.json")).unwrap();
    assert_eq!(stats["per_opcode"]["send"], 1);
    assert_eq!(stats["bytes_sent"], 4);
}

#[test]
fn overlap_flags_select_the_policy() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("o.json"),
        r#"{"global_mem_bytes": 64, "cores": [{"core_id": 0, "local_mem_bytes": 64,
            "code": ["sldi $r2, 2", "lmv $r2, $r0, 8"]}]}"#,
    )
    .unwrap();
    let strict = pimkit(&["run", "o.json", "--strict-overlap"], dir.path());
    assert_eq!(strict.status.code(), Some(2));
    assert!(stderr(&strict).contains("OverlapUndefined"));
    assert_eq!(pimkit(&["run", "o.json"], dir.path()).status.code(), Some(2));
    assert_eq!(pimkit(&["run", "o.json", "--permissive-overlap"], dir.path()).status.code(), Some(0));
}

#[test]
fn diff_agrees_on_bundles_and_fuzzed_programs() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("p.pasm"), PROGRAM).unwrap();
    assert_eq!(pimkit(&["asm", "p.pasm", "--bundle", "p.json"], dir.path()).status.code(), Some(0));
    let out = pimkit(&["diff", "p.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(report.get("field").is_none());
    let out = pimkit(&["diff", "--fuzz", "8", "--cores", "3", "--body-len", "60"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("8 programs, 0 divergent"));
}

#[test]
fn user_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    assert_eq!(pimkit(&["run", "missing.json"], dir.path()).status.code(), Some(1));
    assert_eq!(pimkit(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(pimkit(&["diff"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("x.bin"), b"nope").unwrap();
    assert_eq!(pimkit(&["disasm", "x.bin"], dir.path()).status.code(), Some(1));
}

#[test]
fn selftest_passes_and_catches_an_injected_fault() {
    let dir = TempDir::new().unwrap();
    let out = pimkit(&["selftest"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS codec roundtrip"));
    assert!(stdout(&out).contains("PASS assembler roundtrip"));
    let out = pimkit(&["selftest", "--inject-fault"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("FAIL per-opcode differential"), "{}", stdout(&out));
}
