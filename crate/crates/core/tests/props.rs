mod common;

use common::{assemble_gen, cross_check, gen, mode_configs};
use proptest::prelude::*;
use safespec::isa::{assemble, disassemble, interpret};
use safespec::memsys::PageTable;
use safespec::telemetry::{percentile, Histogram};

fn brute_percentile(samples: &mut [usize], p: f64) -> usize {
    samples.sort_unstable();
    let n = samples.len();
    // Smallest index i with (i + 1) / n >= p.
    let i = (0..n).find(|&i| (i + 1) as f64 / n as f64 >= p).unwrap_or(n - 1);
    samples[i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_model_agrees_on_random_programs(g in gen(true)) {
        let p = assemble_gen(&g);
        let r = cross_check(&p, &PageTable::for_program(&p), &mode_configs());
        prop_assert!(r.is_ok(), "{:?}\n{}", r, common::render(&g));
    }

    #[test]
    fn disassembly_reassembles_to_the_same_code(g in gen(true)) {
        let p = assemble_gen(&g);
        let again = assemble(&disassemble(&p)).unwrap();
        prop_assert_eq!(&again.instructions, &p.instructions);
        prop_assert_eq!(again.fault_handler, p.fault_handler);
    }

    #[test]
    fn interpreter_is_deterministic(g in gen(true)) {
        let p = assemble_gen(&g);
        let pt = PageTable::for_program(&p);
        prop_assert_eq!(interpret(&p, 100_000, &pt), interpret(&p, 100_000, &pt));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn percentile_matches_sorting(samples in prop::collection::vec(0usize..300, 1..400), p in 0.0001f64..=1.0) {
        let mut h = Histogram::default();
        for &s in &samples {
            h.record(s, 1);
        }
        let mut v = samples.clone();
        prop_assert_eq!(percentile(&h, p).unwrap(), brute_percentile(&mut v, p));
        prop_assert_eq!(percentile(&h, 1.0).unwrap(), *samples.iter().max().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wfc_committed_state_matches_a_committed_only_replay(g in gen(true)) {
        let p = assemble_gen(&g);
        let r = common::check_purity(&p, &safespec::config::MachineConfig::with_mode(safespec::safespec::Mode::Wfc));
        prop_assert!(r.is_ok(), "{:?}\n{}", r, common::render(&g));
    }
}

#[test]
fn the_purity_check_catches_baseline_fills() {
    // A mispredicted branch over a load: baseline fills the line anyway.
    let src = "MOVI r1, 0x10000\nMOVI r2, 1\nMUL r2, r2, 1\nMUL r2, r2, 1\nMUL r2, r2, 1\nBNE r2, 0, out\nLOAD r3, [r1+512]\nout: HALT\n.data 0x10000 rw\n.zero 1024";
    let p = assemble(src).unwrap();
    let base = safespec::config::MachineConfig::with_mode(safespec::safespec::Mode::Baseline);
    assert!(common::check_purity(&p, &base).is_err());
    let wfc = safespec::config::MachineConfig::with_mode(safespec::safespec::Mode::Wfc);
    assert!(common::check_purity(&p, &wfc).is_ok());
}
