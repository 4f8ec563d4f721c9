use safespec::config::MachineConfig;
use safespec::cpu::Machine;
use safespec::isa::assemble;
use safespec::safespec::{Mode, ShadowKind};
use safespec::telemetry::StatsSnapshot;

fn run(src: &str, mode: Mode) -> StatsSnapshot {
    let p = assemble(src).unwrap();
    let mut m = Machine::for_program(MachineConfig::with_mode(mode), &p);
    m.warm_code();
    let out = m.run(1_000_000);
    assert!(out.halted);
    out.stats
}

fn d_max(s: &StatsSnapshot) -> usize {
    s.histogram(ShadowKind::D).max().unwrap_or(0)
}

// A multiply chain keeps the head busy so the loads behind it are speculative.
fn slow_head(n: usize) -> String {
    "MOVI r9, 3\n".to_string() + &"MUL r9, r9, 1\n".repeat(n)
}

#[test]
fn idle_machine_samples_zero() {
    let s = run("HALT", Mode::Wfc);
    for k in ShadowKind::ALL {
        assert_eq!(s.histogram(k).max(), Some(0), "{k:?}");
    }
}

// Loop whose branch follows `taken(i)`. Each path loads a fresh line after a
// multiply, so the load is never at the head; a FENCE at the join keeps the
// wrong path from running into the next iteration.
fn path_loop(iters: u64, shift: u32, flip: bool) -> String {
    format!(
        "
        MOVI r1, 0
top:    SHR  r3, r1, {shift}
        AND  r3, r3, 1
        XOR  r3, r3, {flip}
        MUL  r4, r3, 1
        MUL  r4, r4, 1
        MUL  r4, r4, 1
        MUL  r4, r4, 1
        MUL  r4, r4, 1
        MUL  r4, r4, 1
        SHL  r6, r1, 6
        BNE  r4, 0, taken
        MUL  r10, r4, 1
        LOAD r5, [r6+0x100000]
        JMP  join
taken:  MUL  r10, r4, 1
        LOAD r5, [r6+0x200000]
join:   FENCE
        ADD  r1, r1, 1
        BLT  r1, {iters}, top
        HALT
.data 0x100000 rw
        .zero {bytes}
.data 0x200000 rw
        .zero {bytes}
",
        flip = flip as u64,
        bytes = iters * 64,
    )
}

/// Mispredicts of a 2-bit counter starting weakly not-taken.
fn two_bit_mispredicts(outcomes: impl Iterator<Item = bool>) -> u64 {
    let mut c = 1u8;
    let mut miss = 0;
    for t in outcomes {
        miss += ((c >= 2) != t) as u64;
        c = if t { (c + 1).min(3) } else { c.saturating_sub(1) };
    }
    miss
}

fn data_prog(body: &str, bytes: usize) -> String {
    slow_head(20) + "MOVI r1, 0x10000\n" + body + &format!("HALT\n.data 0x10000 rw\n.zero {bytes}")
}

#[test]
fn single_speculative_load_occupies_one_entry() {
    let s = run(&data_prog("LOAD r2, [r1]\n", 64), Mode::Wfc);
    assert_eq!(d_max(&s), 1);
    assert_eq!(s.histogram(ShadowKind::DTlb).max(), Some(1));
    assert_eq!(s.commit_rate(ShadowKind::D), Some(1.0));
}

#[test]
fn forty_independent_loads_fill_forty_entries() {
    let body: String = (0..40).map(|i| format!("LOAD r2, [r1+{}]\n", i * 64)).collect();
    for mode in [Mode::Wfb, Mode::Wfc] {
        let s = run(&data_prog(&body, 4096), mode);
        assert_eq!(d_max(&s), 40, "{mode}");
        assert!(d_max(&s) <= 72);
        assert_eq!(s.access(ShadowKind::D).misses, 40);
    }
}

#[test]
fn baseline_never_shadows() {
    let body: String = (0..40).map(|i| format!("LOAD r2, [r1+{}]\n", i * 64)).collect();
    let s = run(&data_prog(&body, 4096), Mode::Baseline);
    for k in ShadowKind::ALL {
        assert_eq!(s.histogram(k).max(), Some(0), "{k:?}");
        assert_eq!(s.commit_rate(k), None);
    }
}

#[test]
fn rereads_of_a_speculative_line_hit_the_shadow() {
    // One miss, ten speculative re-reads, then one committed read after the fence.
    let body = "LOAD r2, [r1]\n".repeat(11) + "FENCE\nLOAD r3, [r1+8]\n";
    let s = run(&data_prog(&body, 64), Mode::Wfc);
    let a = s.access(ShadowKind::D);
    assert_eq!((a.accesses, a.misses, a.shadow_hits, a.committed_hits()), (12, 1, 10, 1));
    assert_eq!(s.shadow_hit_fraction(ShadowKind::D), Some(10.0 / 11.0));
}

#[test]
fn no_speculative_reuse_means_no_shadow_hits() {
    let body: String = (0..8).map(|i| format!("LOAD r2, [r1+{}]\n", i * 64)).collect();
    let s = run(&data_prog(&body, 512), Mode::Wfc);
    assert_eq!(s.shadow_hit_fraction(ShadowKind::D), Some(0.0));
}

#[test]
fn straight_line_code_in_one_line_hits_the_shadow_icache() {
    // 16 instructions fill one line; fetch groups of 6 make three accesses,
    // the first of which misses.
    let p = assemble(&("ADD r1, r1, 1\n".repeat(15) + "HALT")).unwrap();
    let s = Machine::for_program(MachineConfig::with_mode(Mode::Wfc), &p).run(100_000).stats;
    let a = s.access(ShadowKind::I);
    assert_eq!((a.accesses, a.misses, a.shadow_hits), (3, 1, 2));
    assert_eq!(s.shadow_hit_fraction(ShadowKind::I), Some(1.0));
    assert_eq!(s.commit_rate(ShadowKind::I), Some(1.0));
}

#[test]
fn branch_free_code_commits_all_shadow_state() {
    let body: String = (0..30).map(|i| format!("LOAD r2, [r1+{}]\nADD r3, r3, r2\n", i * 136)).collect();
    let p = assemble(&data_prog(&body, 8192)).unwrap();
    for mode in [Mode::Wfb, Mode::Wfc] {
        let s = Machine::for_program(MachineConfig::with_mode(mode), &p).run(1_000_000).stats;
        for k in ShadowKind::ALL {
            assert_eq!(s.commit_rate(k), Some(1.0), "{mode} {k:?}");
        }
        assert!(s.allocations_balanced());
    }
}

#[test]
fn mispredict_loops_match_a_two_bit_oracle() {
    let n = 64;
    for (shift, flip) in [(0, false), (0, true), (1, false), (2, true)] {
        let s = run(&path_loop(n, shift, flip), Mode::Wfc);
        let m = two_bit_mispredicts((0..n).map(|i| ((i >> shift) & 1 == 1) != flip));
        // Every iteration commits one load; every mispredict squashes one.
        let c = s.shadow_counters(ShadowKind::D);
        assert_eq!((c.promotions, c.squash_frees), (n, m), "{shift} {flip}");
        assert_eq!(s.commit_rate(ShadowKind::D), Some(n as f64 / (n + m) as f64));
    }
    // Alternating from weakly not-taken: every other iteration mispredicts.
    assert_eq!(two_bit_mispredicts((0..n).map(|i| i & 1 == 1)), n / 2);
    // Same pattern shifted by one: every iteration mispredicts, so half of
    // all path loads are squashed.
    let s = run(&path_loop(n, 0, true), Mode::Wfc);
    assert_eq!(s.commit_rate(ShadowKind::D), Some(0.5));
}
