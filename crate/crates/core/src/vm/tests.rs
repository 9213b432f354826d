use super::*;
use crate::asm::assemble;
use crate::manifest::{CoreConfig, MemInit};

fn bundle(sources: &[&str]) -> ProgramBundle {
    let cores = sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let program = assemble(src).unwrap_or_else(|e| panic!("{e:?}"));
            let code = program.sections.into_iter().flat_map(|s| s.instructions).collect();
            let mut core = CoreConfig::new(i, code);
            core.local_mem_bytes = 1024;
            core
        })
        .collect();
    ProgramBundle { cores, global_mem_bytes: 4096, ..ProgramBundle::default() }
}

fn machine(src: &str) -> Machine {
    Machine::load(&bundle(&[src])).unwrap()
}

fn put(m: &mut Machine, addr: usize, bytes: &[u8]) {
    m.core_mut(0).lmem[addr..addr + bytes.len()].copy_from_slice(bytes);
}

fn get(m: &Machine, addr: usize, len: usize) -> Vec<u8> {
    m.core(0).lmem[addr..addr + len].to_vec()
}

fn i8s(values: &[i8]) -> Vec<u8> {
    values.iter().map(|v| *v as u8).collect()
}

fn run_clean(m: &mut Machine) -> RunResult {
    let r = m.run(10_000);
    assert!(r.is_clean(), "{:?}", r.traps);
    r
}

fn trap_kind(m: &mut Machine) -> TrapKind {
    m.run(10_000).trap().expect("trap").kind
}

#[test]
fn power_up_state() {
    let m = Machine::load(&bundle(&["sldi $r1, 1", "sldi $r1, 2"])).unwrap();
    for c in m.cores() {
        assert_eq!(c.pc, 0);
        assert_eq!(c.status, CoreStatus::Ready);
        assert!(c.events.iter().all(|e| *e == 0));
        assert!(c.lmem.iter().all(|b| *b == 0));
    }
    assert_eq!(m.pending_messages(0, 1), 0);
    assert_eq!(m.pending_messages(1, 0), 0);
}

#[test]
fn global_memory_initialization() {
    let mut b = bundle(&[""]);
    b.global_mem_init.push(MemInit { address: 0, bytes: vec![1, 2, 3, 4] });
    let m = Machine::load(&b).unwrap();
    assert_eq!(m.gmem()[..5], [1, 2, 3, 4, 0]);
}

#[test]
fn effective_address_examples() {
    assert_eq!(effective_address(100, Offset::new(0b010, 4), Slot::Rs1, 2), 108);
    for slot in [Slot::Rd, Slot::Rs1, Slot::Rs2] {
        assert_eq!(effective_address(100, Offset::new(0, 9), slot, 4), 100);
    }
    assert_eq!(effective_address(0, Offset::new(0b001, 7), Slot::Rd, 1), 7);
    assert_eq!(effective_address(0, Offset::new(0b001, 7), Slot::Rs2, 1), 0);
}

#[test]
fn one_instruction_then_finished() {
    let mut m = machine("sldi $r1, 5");
    assert_eq!(m.step(), StepOutcome::Progressed);
    assert_eq!(m.core(0).regs[1], 5);
    assert_eq!(m.core(0).status, CoreStatus::Finished);
    assert_eq!(m.step(), StepOutcome::AllBlockedOrFinished);
}

#[test]
fn scalar_arithmetic() {
    let mut m = machine(
        "sldi $r1, 2\nsldi $r2, 3\nsadd $r3, $r1, $r2\nsldi $r4, 5\nsaddi $r5, $r4, -3\n\
         sldi $r6, 0x10000\nsmul $r7, $r6, $r6\nssub $r8, $r1, $r2\nsldi $r9, -1",
    );
    run_clean(&mut m);
    let r = m.core(0).regs;
    assert_eq!(r[3], 5);
    assert_eq!(r[5], 2);
    assert_eq!(r[7], 0);
    assert_eq!(r[8], u32::MAX);
    assert_eq!(r[9], 0xffff_ffff);
}

#[test]
fn sld_reads_little_endian_from_register_pair() {
    let mut b = bundle(&["sldi $r2, 8\nsldi $r3, 0\nsld $r5, $r2, 4\nsldi $r3, 1\nsld $r6, $r2, 0"]);
    b.global_mem_init.push(MemInit { address: 12, bytes: vec![0x78, 0x56, 0x34, 0x12] });
    let mut m = Machine::load(&b).unwrap();
    let r = m.run(100);
    assert_eq!(m.core(0).regs[5], 0x1234_5678);
    // the odd register is the high half: 2^32 + 8 is far out of range
    assert_eq!(r.trap().unwrap().kind, TrapKind::OutOfBoundsGlobal);
    assert_eq!(r.trap().unwrap().pc, 4);
}

#[test]
fn setbw_derives_byte_widths() {
    let mut m = machine("setbw 8, 16");
    run_clean(&mut m);
    assert_eq!(m.core(0).bw, BitWidthState { ibiw: 8, obiw: 16, ibyw: 1, obyw: 2 });
    let mut m = machine("setbw 10, 10");
    run_clean(&mut m);
    assert_eq!(m.core(0).bw.ibyw, 2);
}

#[test]
fn setbw_rejected_on_fixed_width_hardware() {
    let mut b = bundle(&["setbw 8, 16"]);
    b.variable_bitwidth_supported = false;
    assert!(Machine::load(&b).is_err());
}

fn mvmul_machine(weights: &[Vec<i32>], src: &str) -> Machine {
    let mut b = bundle(&[src]);
    b.cores[0].add_matrix_group(Matrix::from_rows(weights));
    Machine::load(&b).unwrap()
}

#[test]
fn mvmul_examples() {
    let identity = [vec![1, 0], vec![0, 1]];
    let mut m = mvmul_machine(&identity, "sldi $r2, 16\nmvmul $r2, $r0, 8, 0, 0");
    put(&mut m, 0, &i8s(&[3, -1]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 2), i8s(&[3, -1]));

    let mut m = mvmul_machine(&identity, "sldi $r2, 16\nmvmul $r2, $r0, 8, 1, 0");
    put(&mut m, 0, &i8s(&[3, -1]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 2), i8s(&[3, 0]));

    let mut m = mvmul_machine(&[vec![127, 127]], "sldi $r2, 16\nmvmul $r2, $r0, 8, 0, 0");
    put(&mut m, 0, &i8s(&[127, 127]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), i8s(&[127]));

    let mut m = mvmul_machine(&[vec![-128, -128]], "sldi $r2, 16\nmvmul $r2, $r0, 8, 0, 0");
    put(&mut m, 0, &i8s(&[127, 127]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), i8s(&[-128]));
}

#[test]
fn mvmul_output_bounds() {
    let mut m = mvmul_machine(&[vec![1], vec![1]], "sldi $r2, 1023\nmvmul $r2, $r0, 8, 0, 0");
    assert_eq!(trap_kind(&mut m), TrapKind::OutOfBoundsLocal);
}

#[test]
fn elementwise_examples() {
    let mut m = machine("sldi $r2, 8\nsldi $r3, 16\nvvadd $r3, $r0, $r2, 3");
    put(&mut m, 0, &[1, 2, 3]);
    put(&mut m, 8, &[4, 5, 6]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 3), [5, 7, 9]);

    let mut m = machine("sldi $r2, 8\nsldi $r3, 16\nvvsra $r3, $r0, $r2, 2");
    put(&mut m, 0, &i8s(&[-8, 8]));
    put(&mut m, 8, &[1, 2]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 2), i8s(&[-4, 2]));

    let mut m = machine("sldi $r2, 8\nsldi $r3, 16\nvvadd $r3, $r0, $r2, 1");
    put(&mut m, 0, &[127]);
    put(&mut m, 8, &[1]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), i8s(&[-128]));
}

#[test]
fn negative_shift_traps() {
    let mut m = machine("sldi $r2, 8\nvvsll $r0, $r0, $r2, 1");
    put(&mut m, 8, &i8s(&[-1]));
    assert_eq!(trap_kind(&mut m), TrapKind::NegativeShift);
}

#[test]
fn ten_bit_elements_occupy_two_bytes() {
    let mut m = machine("setbw 10, 10\nsldi $r2, 8\nsldi $r3, 16\nvvadd $r3, $r0, $r2, 1");
    put(&mut m, 0, &511u16.to_le_bytes());
    put(&mut m, 8, &1u16.to_le_bytes());
    run_clean(&mut m);
    // -512 stored sign-extended
    assert_eq!(get(&m, 16, 2), (-512i16).to_le_bytes());
}

#[test]
fn offsets_scale_by_element_width() {
    let mut m = machine("setbw 16, 16\nsldi $r3, 64\nvvadd $r3, $r0, $r0, 1, [0b111:2]");
    put(&mut m, 4, &300u16.to_le_bytes());
    run_clean(&mut m);
    assert_eq!(get(&m, 68, 2), 600u16.to_le_bytes());
}

#[test]
fn activation_examples() {
    let mut m = machine("sldi $r3, 16\nvtanh $r3, $r0, 1\nsldi $r4, 32\nvsigm $r4, $r0, 1");
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), [0]);
    assert_eq!(get(&m, 32, 1), [32]);

    let mut m = machine("sldi $r3, 16\nvtanh $r3, $r0, 1");
    put(&mut m, 0, &[127]);
    run_clean(&mut m);
    let expected = ((127.0f64 / 64.0).tanh() * 64.0).round() as u8;
    assert_eq!(get(&m, 16, 1), [expected]);
}

#[test]
fn reduction_examples() {
    let mut m = machine("sldi $r2, 8\nsldi $r3, 16\nvdmul $r3, $r0, $r2, 3");
    put(&mut m, 0, &[1, 2, 3]);
    put(&mut m, 8, &[4, 5, 6]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), [32]);

    let mut m = machine("sldi $r2, 1\nsldi $r3, 16\nvavg $r3, $r0, $r2, 4, 0");
    put(&mut m, 0, &[1, 2, 3, 4]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), [2]);

    let mut m = machine("sldi $r2, 1\nsldi $r3, 16\nvavg $r3, $r0, $r2, 2, 0");
    put(&mut m, 0, &i8s(&[-1, -2]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 1), i8s(&[-1]));
}

#[test]
fn zero_length_traps() {
    let mut m = machine("vvadd $r0, $r0, $r0, 0");
    assert_eq!(trap_kind(&mut m), TrapKind::LengthMismatch);
}

#[test]
fn move_and_resize_examples() {
    let mut m = machine("sldi $r2, 2\nsldi $r3, 16\nvmv $r3, $r0, $r2, 3");
    put(&mut m, 0, &[9, 0, 8, 0, 7, 0]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 3), [9, 8, 7]);

    let mut m = machine("sldi $r2, 100\nsldi $r3, 16\nvrsu $r3, $r0, $r2, 2");
    put(&mut m, 0, &[50, 150u8]);
    // 150 as a signed 8-bit element is -106
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 2), i8s(&[50, -106]));

    let mut m = machine("setbw 16, 16\nsldi $r2, 100\nsldi $r3, 16\nvrsu $r3, $r0, $r2, 2");
    put(&mut m, 0, &[50, 0, 150, 0]);
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 4), [50, 0, 100, 0]);

    let mut m = machine("sldi $r3, 16\nvrsl $r3, $r0, $r0, 2");
    put(&mut m, 0, &i8s(&[-5, 5]));
    run_clean(&mut m);
    assert_eq!(get(&m, 16, 2), [0, 5]);
}

#[test]
fn in_place_narrowing_is_defined_and_widening_is_not() {
    let mut m = machine("setbw 16, 8\nsldi $r2, 1000\nvrsu $r0, $r0, $r2, 3");
    put(&mut m, 0, &[1, 0, 2, 0, 3, 0]);
    run_clean(&mut m);
    assert_eq!(get(&m, 0, 3), [1, 2, 3]);

    let src = "setbw 8, 16\nsldi $r2, 1000\nvrsu $r0, $r0, $r2, 3";
    let mut m = machine(src);
    assert_eq!(trap_kind(&mut m), TrapKind::OverlapUndefined);

    let options = VmOptions { overlap: OverlapMode::Permissive, ..VmOptions::default() };
    let mut m = Machine::load_with(&bundle(&[src]), options).unwrap();
    put(&mut m, 0, &[1, 2, 3]);
    run_clean(&mut m);
    assert_eq!(get(&m, 0, 6), [1, 0, 2, 0, 3, 0]);
}

#[test]
fn memory_examples() {
    let mut m = machine("sldi $r4, 0\nldi $r4, 0xab, 4, 0");
    run_clean(&mut m);
    assert_eq!(get(&m, 0, 5), [0xab, 0xab, 0xab, 0xab, 0]);

    let mut b = bundle(&["sldi $r2, 16\nsldi $r4, 100\nld $r4, $r2, 8"]);
    b.global_mem_init.push(MemInit { address: 16, bytes: (1..=8).collect() });
    let mut m = Machine::load(&b).unwrap();
    run_clean(&mut m);
    assert_eq!(get(&m, 100, 8), (1..=8).collect::<Vec<u8>>());

    let mut m = machine("sldi $r2, 200\nsldi $r4, 4\nst $r2, $r4, 3, [0b001:1]");
    put(&mut m, 4, &[7, 8, 9]);
    run_clean(&mut m);
    assert_eq!(m.gmem()[200..205], [0, 7, 8, 9, 0]);

    let mut m = machine("sldi $r2, 4\nlmv $r2, $r0, 8");
    assert_eq!(trap_kind(&mut m), TrapKind::OverlapUndefined);
}

#[test]
fn rendezvous_transfers_in_one_step() {
    let b = bundle(&["sldi $r1, 0\nsend $r1, 1, 4, 0", "sldi $r2, 32\nrecv $r2, 0, 4, 0"]);
    let mut m = Machine::load_with(&b, VmOptions { keep_trace: true, ..VmOptions::default() }).unwrap();
    put(&mut m, 0, &[1, 2, 3, 4]);
    let r = run_clean(&mut m);
    assert_eq!(m.core(1).lmem[32..36], [1, 2, 3, 4]);
    assert_eq!(r.bytes_sent, 4);
    assert_eq!(r.steps, 3);
    let last: Vec<_> = m.trace().iter().filter(|e| e.step == 2).map(|e| e.core).collect();
    assert_eq!(last.len(), 2);
    assert_eq!(m.traffic()[&(0, 1)], (4, 4));
    assert!(m.is_finished());
}

#[test]
fn rendezvous_size_mismatch_traps() {
    let b = bundle(&["send $r0, 1, 4, 0", "recv $r0, 0, 8, 0"]);
    let mut m = Machine::load(&b).unwrap();
    assert_eq!(trap_kind(&mut m), TrapKind::SizeMismatchSendRecv);
}

#[test]
fn send_to_self_is_rejected() {
    assert!(Machine::load(&bundle(&["send $r0, 0, 4, 0"])).is_err());
}

#[test]
fn unmatched_send_deadlocks() {
    let b = bundle(&["send $r0, 1, 4, 0", "sldi $r1, 1"]);
    let mut m = Machine::load(&b).unwrap();
    let r = m.run(100);
    assert_eq!(r.trap().unwrap().kind, TrapKind::Deadlock);
    assert_eq!(r.trap().unwrap().core, 0);
    assert_eq!(m.pending_messages(0, 1), 1);
}

#[test]
fn sync_twice_then_wait_two() {
    let b = bundle(&["wait 0, 2\nwait 0, 0\nsldi $r1, 1", "sync 0, 0\nsync 0, 0"]);
    let mut m = Machine::load(&b).unwrap();
    run_clean(&mut m);
    assert_eq!(m.core(0).events[0], 0);
    assert_eq!(m.core(0).regs[1], 1);
}

#[test]
fn wait_zero_passes_at_power_up() {
    let mut m = machine("wait 0, 0");
    run_clean(&mut m);
    assert_eq!(m.core(0).events[0], 0);
}

#[test]
fn wait_without_sync_deadlocks() {
    let mut m = machine("wait 0, 1");
    assert_eq!(trap_kind(&mut m), TrapKind::Deadlock);
}

#[test]
fn run_counts() {
    let mut m = Machine::load(&bundle(&["", ""])).unwrap();
    let r = run_clean(&mut m);
    assert_eq!(r.steps, 0);
    assert!(m.is_finished());

    let mut m = machine("sldi $r1, 1\nsldi $r2, 2\nsadd $r3, $r1, $r2");
    let r = run_clean(&mut m);
    assert_eq!(r.per_core, vec![3]);
    assert_eq!(r.per_opcode["sldi"], 2);
    assert_eq!(r.per_opcode["sadd"], 1);

    let mut m = machine("sldi $r1, 1\nsldi $r2, 2");
    let r = m.run(1);
    assert_eq!(r.trap().unwrap().kind, TrapKind::StepLimitExceeded);
    assert_eq!(r.steps, 1);
}

#[test]
fn scheduling_rotates_between_cores() {
    let b = bundle(&["sldi $r1, 1\nsldi $r1, 2", "sldi $r1, 3\nsldi $r1, 4"]);
    let mut m = Machine::load_with(&b, VmOptions { keep_trace: true, ..VmOptions::default() }).unwrap();
    run_clean(&mut m);
    let order: Vec<_> = m.trace().iter().map(|e| (e.core, e.pc)).collect();
    assert_eq!(order, [(0, 0), (1, 0), (0, 1), (1, 1)]);
}

#[test]
fn trace_lines_are_tab_separated() {
    let b = bundle(&["sldi $r1, 7"]);
    let mut m = Machine::load_with(&b, VmOptions { keep_trace: true, ..VmOptions::default() }).unwrap();
    run_clean(&mut m);
    assert_eq!(m.trace()[0].to_string(), "0\t0\t0\tsldi $r1, 7\t$r1=0x00000007");
}

#[test]
fn stats_serialize_with_expected_keys() {
    let mut m = machine("sldi $r1, 1");
    let json = serde_json::to_value(m.run(10)).unwrap();
    for key in ["steps", "per_opcode", "per_core", "bytes_sent", "traps"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn digest_is_fnv1a() {
    assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
}
