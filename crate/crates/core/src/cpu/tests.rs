use super::*;
use crate::isa::{assemble, interpret};
use crate::safespec::{FullPolicy, Preset};

const CODE_PAGE: u64 = crate::isa::CODE_BASE >> crate::memsys::PAGE_SHIFT;

fn machine(src: &str, mode: Mode) -> Machine {
    let p = assemble(src).unwrap();
    Machine::for_program(MachineConfig::with_mode(mode), &p)
}

#[test]
fn halt_only_takes_pipeline_depth_plus_one() {
    for mode in Mode::ALL {
        let mut m = machine("HALT", mode);
        m.warm_code();
        let out = m.run(1000);
        assert!(out.halted);
        assert_eq!(out.stats.cycles, m.config.pipeline.depth() + 1, "{mode}");
    }
}

#[test]
fn twelve_alu_ops_commit_over_two_cycles() {
    let src = "MOVI r1, 1\n".repeat(12) + "HALT";
    let mut m = machine(&src, Mode::Wfc);
    m.warm_code();
    m.enable_commit_log();
    m.run(1000);
    let log = m.commit_log();
    assert_eq!(log[0].cycle, 12);
    assert_eq!(log[11].cycle, 13);
    assert_eq!(log.iter().filter(|r| r.cycle == 12).count(), 6);
}

#[test]
fn cold_load_pays_memory_latency() {
    let src = "MOVI r1, 0x10000\nLOAD r2, [r1]\nHALT\n.data 0x10000 rw\n.word 7";
    for mode in Mode::ALL {
        let mut warm = machine(src, mode);
        warm.warm_code();
        let out = warm.run(10_000);
        assert_eq!(out.state.regs[2], 7);
        // Warming the code page already cached the shared directory line, so
        // the walk is TLB probe + L1D hit + memory read of the table line.
        let pd = crate::memsys::walk_lines(0x10)[0];
        assert_eq!(pd, crate::memsys::walk_lines(CODE_PAGE)[0]);
        let walk = 1 + 4 + 191;
        // Load issues at 12 behind the MOVI and commits one cycle after data.
        assert_eq!(out.stats.cycles, 12 + walk + 191 + 1, "{mode}");
        assert_eq!(out.stats.access(ShadowKind::D).misses, 1);
    }
}

const LOOPS: &str = "
        MOVI r1, 0x20000
        MOVI r2, 0
        MOVI r5, 0
outer:  MOVI r3, 0
inner:  SHL  r4, r3, 3
        ADD  r4, r4, r1
        LOAD r6, [r4]
        ADD  r5, r5, r6
        STORE [r4+512], r5
        AND  r7, r3, 1
        BEQ  r7, 0, even
        XOR  r5, r5, r3
even:   ADD  r3, r3, 1
        BLT  r3, 23, inner
        ADD  r2, r2, 1
        BLT  r2, 9, outer
        HALT
.data 0x20000 rw
        .word 3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4, 6, 2, 6
        .zero 1024
";

#[test]
fn every_mode_matches_the_interpreter() {
    let p = assemble(LOOPS).unwrap();
    let golden = interpret(&p, 1_000_000, &PageTable::for_program(&p));
    assert!(golden.halted);
    for mode in Mode::ALL {
        let mut m = Machine::for_program(MachineConfig::with_mode(mode), &p);
        let out = m.run(1_000_000);
        assert!(out.halted, "{mode}");
        assert!(out.state.same_architecture(&golden), "{mode}");
        assert!(out.stats.mispredicts > 0);
        assert!(out.stats.allocations_balanced(), "{mode}");
        assert_eq!(m.live_handles(), [0; 4]);
        assert_eq!(m.shadow.occupancy_sample(), [0; 4]);
    }
}

#[test]
fn sized_preset_with_either_policy_stays_correct() {
    let p = assemble(LOOPS).unwrap();
    let golden = interpret(&p, 1_000_000, &PageTable::for_program(&p));
    for policy in [FullPolicy::Block, FullPolicy::Drop] {
        for mode in [Mode::Wfb, Mode::Wfc] {
            let mut c = MachineConfig {
                shadow: crate::safespec::ShadowConfig::with_preset(mode, Preset::Sized, policy),
                ..MachineConfig::default()
            };
            c.shadow.capacities = [2, 1, 1, 1];
            let out = Machine::for_program(c, &p).run(1_000_000);
            assert!(out.halted && out.state.same_architecture(&golden), "{mode} {policy:?}");
            assert!(out.stats.total_full_events() > 0);
        }
    }
}

#[test]
fn worst_case_preset_never_fills() {
    for mode in [Mode::Wfb, Mode::Wfc] {
        let out = machine(LOOPS, mode).run(1_000_000);
        assert_eq!(out.stats.total_full_events(), 0);
    }
}

#[test]
fn fault_without_handler_halts_at_the_faulting_pc() {
    let src = "MOVI r1, 0x30000\nLOAD r2, [r1]\nMOVI r3, 1\nHALT\n.data 0x30000 priv\n.word 42";
    for mode in Mode::ALL {
        let out = machine(src, mode).run(100_000);
        assert!(out.halted);
        assert_eq!(out.state.fault_count, 1);
        assert_eq!(out.state.regs[2], 0);
        assert_eq!(out.state.pc, Program::pc_of(1));
    }
}

#[test]
fn wfc_leaves_no_trace_of_a_squashed_load() {
    // The load under the mispredicted branch never commits.
    let src = "
        MOVI r1, 0x40000
        LOAD r9, [r1]
        BEQ  r9, 0, skip
        LOAD r2, [r1+4096]
skip:   HALT
.data 0x40000 rw
        .word 0
        .zero 8192
";
    let p = assemble(src).unwrap();
    let victim_line = line_of(0x41000);
    for mode in Mode::ALL {
        let mut m = Machine::for_program(MachineConfig::with_mode(mode), &p);
        m.bpu.poison(Program::pc_of(2), Program::pc_of(4), false);
        m.run(100_000);
        let cached = m.mem.probe(Side::Data, victim_line) != crate::memsys::HitLevel::Mem;
        assert_eq!(cached, mode == Mode::Baseline, "{mode}");
    }
}
