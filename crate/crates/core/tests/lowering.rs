use proptest::prelude::*;
use rand::Rng;

use pimkit::fuzz;
use pimkit::isa::Opcode;
use pimkit::lower::{lower_mlp, reference_output, MlpSpec, Placement, Transport};
use pimkit::oracle::Activation;
use pimkit::vm::Machine;

fn random_spec(seed: u64) -> (MlpSpec, Vec<i64>) {
    let mut rng = fuzz::rng(seed);
    let layers = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=10)).collect();
    let bits = if rng.random_bool(0.7) { 8 } else { 16 };
    let lim = if bits == 8 { 127 } else { 2000 };
    let weights = (0..layers)
        .map(|l| {
            (0..dims[l + 1]).map(|_| (0..dims[l]).map(|_| rng.random_range(-lim..=lim)).collect()).collect()
        })
        .collect();
    let biases = (0..layers)
        .map(|l| {
            let zero = rng.random_bool(0.4);
            (0..dims[l + 1]).map(|_| if zero { 0 } else { rng.random_range(-lim..=lim) }).collect()
        })
        .collect();
    let mut spec = MlpSpec::new(dims.clone(), weights, biases);
    spec.activations = (0..layers)
        .map(|_| match rng.random_range(0..4) {
            0 => Activation::None,
            1 | 2 => Activation::Relu,
            _ if rng.random_bool(0.5) => Activation::Tanh,
            _ => Activation::Sigmoid,
        })
        .collect();
    spec.widths = vec![(bits, bits); layers];
    spec.variable_bitwidth = rng.random_bool(0.8);
    spec.transport = if rng.random_bool(0.5) { Transport::SendRecv } else { Transport::GlobalMemory };
    spec.core_assignment = (0..layers)
        .map(|l| {
            let parts = rng.random_range(1..=dims[l + 1].min(3));
            let mut cores: Vec<u32> = (0..4).collect();
            cores.sort_by_key(|_| rng.random::<u32>());
            cores.truncate(parts);
            if parts == 1 {
                Placement::Single(cores[0])
            } else {
                Placement::Split(cores)
            }
        })
        .collect();
    if rng.random_bool(0.3) {
        spec.crossbar = Some([rng.random_range(1..=4), rng.random_range(1..=4)]);
    }
    let half = 1i64 << (bits - 1);
    let x = (0..dims[0]).map(|_| rng.random_range(-half..half)).collect();
    (spec, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn lowered_networks_match_layer_composition(seed in any::<u64>()) {
        let (spec, x) = random_spec(seed);
        let lowered = lower_mlp(&spec).unwrap();
        for core in &lowered.bundle.cores {
            for instr in &core.code {
                // vector and matrix code only ever addresses through registers
                prop_assert!(instr.scalar_destination().is_none() || instr.opcode() == Opcode::Sldi);
            }
        }
        let mut m = Machine::load(&lowered.bundle).unwrap();
        lowered.plan.write_input(m.gmem_mut(), &x);
        let run = m.run(1_000_000);
        prop_assert!(run.is_clean(), "{:?}", run.traps);
        prop_assert_eq!(lowered.plan.read_output(m.gmem()), reference_output(&spec, &x));
    }

    #[test]
    fn lowered_regions_are_disjoint_and_aligned(seed in any::<u64>()) {
        let (spec, _) = random_spec(seed);
        let lowered = lower_mlp(&spec).unwrap();
        let elem = lowered.plan.elem_bytes() as u64;
        for regions in lowered.plan.regions.values() {
            let mut spans: Vec<_> = regions.iter().map(|r| (r.start, r.start + r.len)).collect();
            spans.sort_unstable();
            for r in regions {
                prop_assert_eq!(r.start % elem, 0);
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "{:?}", spans);
            }
        }
    }

    #[test]
    fn splitting_a_layer_does_not_change_its_output(seed in any::<u64>(), parts in 1usize..=8) {
        let mut rng = fuzz::rng(seed);
        let weights = vec![(0..8).map(|_| (0..6).map(|_| rng.random_range(-128..=127)).collect()).collect()];
        let biases = vec![(0..8).map(|_| rng.random_range(-128..=127)).collect()];
        let x: Vec<i64> = (0..6).map(|_| rng.random_range(-128..=127)).collect();
        let mut spec = MlpSpec::new(vec![6, 8], weights, biases);
        spec.activations = vec![Activation::Relu];
        let run = |spec: &MlpSpec| {
            let lowered = lower_mlp(spec).unwrap();
            let mut m = Machine::load(&lowered.bundle).unwrap();
            lowered.plan.write_input(m.gmem_mut(), &x);
            assert!(m.run(100_000).is_clean());
            lowered.plan.read_output(m.gmem())
        };
        let whole = run(&spec);
        spec.core_assignment = vec![Placement::Split((0..parts as u32).collect())];
        prop_assert_eq!(run(&spec), whole);
    }
}
