//! The acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};
use rayon::prelude::*;
use safespec::attacks::build::build;
use safespec::attacks::{run_attack_with, run_built, scenario_config, LeakReport, Scenario, Verdict, DEFAULT_SECRET};
use safespec::config::{MachineConfig, DEFAULT_MAX_CYCLES};
use safespec::cpu::Machine;
use safespec::isa::interpret;
use safespec::safespec::{FullPolicy, Mode, Preset, ShadowConfig, ShadowKind};
use safespec::telemetry::{percentile, Histogram, StatsSnapshot};
use safespec::workloads;

const D_BOUND: usize = 72;
const I_BOUND: usize = 224;

/// Everything later criteria re-check across earlier runs.
#[derive(Default)]
struct Seen {
    max_occupancy: [usize; 4],
    worst_case_full_events: u64,
    unbalanced: Vec<String>,
    runs: usize,
}

impl Seen {
    fn report(&mut self, r: &LeakReport) {
        self.runs += 1;
        for k in 0..4 {
            self.max_occupancy[k] = self.max_occupancy[k].max(r.max_occupancy[k]);
        }
        if r.preset == Preset::WorstCase.name() {
            self.worst_case_full_events += r.full_events;
        }
        if !r.allocations_balanced {
            self.unbalanced.push(format!("{} {}", r.scenario, r.mode));
        }
    }

    fn stats(&mut self, label: &str, s: &StatsSnapshot, worst_case: bool) {
        self.runs += 1;
        for k in ShadowKind::ALL {
            let m = s.histogram(k).max().unwrap_or(0);
            self.max_occupancy[k.index()] = self.max_occupancy[k.index()].max(m);
        }
        if worst_case {
            self.worst_case_full_events += s.total_full_events();
        }
        if !s.allocations_balanced() {
            self.unbalanced.push(label.to_string());
        }
    }
}

type Outcome = Result<String, String>;

fn attack(scenario: Scenario, config: &MachineConfig, secret: &[u8], seen: &mut Seen) -> Result<LeakReport, String> {
    let r = run_attack_with(scenario, config, secret, 1, DEFAULT_MAX_CYCLES).map_err(|e| e.to_string())?;
    seen.report(&r);
    Ok(r)
}

fn verdict_line(r: &LeakReport) -> String {
    format!("{}/{}={:?}({:.2})", r.scenario, r.mode, r.verdict, r.accuracy)
}

fn security_matrix(seen: &mut Seen) -> Outcome {
    let mut notes = Vec::new();
    let mut bad = Vec::new();
    for scenario in [Scenario::SpectreV1, Scenario::SpectreV2, Scenario::Meltdown, Scenario::ICache] {
        for mode in Mode::ALL {
            if scenario == Scenario::ICache && mode != Mode::Baseline {
                continue;
            }
            let r = attack(scenario, &scenario_config(scenario, mode), DEFAULT_SECRET, seen)?;
            let ok = match (scenario, mode) {
                (_, Mode::Baseline) => r.verdict == Verdict::Leaks && r.accuracy >= 0.95,
                (Scenario::Meltdown, Mode::Wfb) => r.verdict == Verdict::Leaks,
                _ => r.verdict == Verdict::NoLeak,
            };
            if !ok {
                bad.push(verdict_line(&r));
            }
            notes.push(verdict_line(&r));
        }
    }
    if bad.is_empty() {
        Ok(notes.join(" "))
    } else {
        Err(bad.join(" "))
    }
}

/// Fraction of (byte, bit) windows whose bit was recovered.
fn bit_accuracy(r: &LeakReport) -> f64 {
    let mut right = 0;
    for (s, g) in r.secret.iter().zip(&r.recovered) {
        let g = g.unwrap_or(!s);
        right += 8 - (s ^ g).count_ones();
    }
    right as f64 / (8 * r.secret.len()) as f64
}

fn coverage_matrix(seen: &mut Seen) -> Outcome {
    let mut notes = Vec::new();
    let mut bad = Vec::new();
    for mode in [Mode::Wfb, Mode::Wfc] {
        let r = attack(Scenario::ICache, &scenario_config(Scenario::ICache, mode), DEFAULT_SECRET, seen)?;
        if r.verdict != Verdict::NoLeak {
            bad.push(verdict_line(&r));
        }
        notes.push(verdict_line(&r));
    }
    let other: Vec<u8> = (0..16u8).map(|i| i.wrapping_mul(97).wrapping_add(13)).collect();
    for scenario in [Scenario::TsaDcache, Scenario::TsaDtlb] {
        for mode in [Mode::Wfb, Mode::Wfc] {
            let sized = scenario_config(scenario, mode);
            assert_eq!(sized.shadow.preset, Preset::Sized);
            let r = attack(scenario, &sized, DEFAULT_SECRET, seen)?;
            let bits = bit_accuracy(&r);
            if r.verdict != Verdict::Leaks || bits < 0.95 {
                bad.push(format!("{} sized bits {bits:.2}", verdict_line(&r)));
            }
            notes.push(format!("{}/{}/sized bits={bits:.2}", r.scenario, r.mode));

            let mut worst = MachineConfig::with_mode(mode);
            worst.shadow = ShadowConfig::with_preset(mode, Preset::WorstCase, FullPolicy::Block);
            let a = attack(scenario, &worst, DEFAULT_SECRET, seen)?;
            let b = attack(scenario, &worst, &[0u8; 16], seen)?;
            let c = attack(scenario, &worst, &other, seen)?;
            let equal = a.timings == b.timings && a.timings == c.timings;
            if !equal || a.verdict != Verdict::NoLeak {
                bad.push(format!("{}/{}/worst-case timings equal={equal} verdict={:?}", a.scenario, a.mode, a.verdict));
            }
            notes.push(format!("{}/{}/worst-case equal={equal}", a.scenario, a.mode));
        }
    }
    if bad.is_empty() {
        Ok(notes.join(" "))
    } else {
        Err(bad.join(" "))
    }
}

fn architectural_oracle() -> Outcome {
    let configs = common::mode_configs();
    let mut runner = TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() });
    runner
        .run(&common::gen(true), |g| {
            let p = common::assemble_gen(&g);
            let r = common::cross_check(&p, &safespec::memsys::PageTable::for_program(&p), &configs);
            prop_assert!(r.is_ok(), "{:?}\n{}", r, common::render(&g));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let jobs: Vec<(Scenario, usize, Mode)> = Scenario::ALL
        .iter()
        .flat_map(|&s| [0usize, 7].into_iter().flat_map(move |k| Mode::ALL.into_iter().map(move |m| (s, k, m))))
        .collect();
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|&(s, k, mode)| {
            let built = build(s, DEFAULT_SECRET, k);
            let golden = interpret(&built.program, DEFAULT_MAX_CYCLES, &built.page_table);
            let run = run_built(&built, &scenario_config(s, mode), DEFAULT_MAX_CYCLES)?;
            let (lo, hi) = built.timing_range();
            let same = golden.halted
                && run.state.regs == golden.regs
                && run.state.fault_count == golden.fault_count
                && run.state.mem.without_range(lo, hi) == golden.mem.without_range(lo, hi);
            (!same).then(|| format!("{} byte {k} {mode}", s.name()))
        })
        .collect();
    if failures.is_empty() {
        Ok(format!("256 random programs and {} attack runs agree with the interpreter", jobs.len()))
    } else {
        Err(failures.join(", "))
    }
}

fn purity() -> Outcome {
    let wfc = MachineConfig::with_mode(Mode::Wfc);
    let mut runner = TestRunner::deterministic();
    let strategy = common::gen(true);
    let mut checked = 0;
    let mut cycles = 0;
    let mut tries = 0;
    while checked < 20 {
        tries += 1;
        if tries > 500 {
            return Err(format!("only {checked} branchy programs generated"));
        }
        let g = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let p = common::assemble_gen(&g);
        let s = Machine::for_program(wfc, &p).run(common::STEPS * 50).stats;
        if s.mispredicts == 0 || s.squashed_uops == 0 {
            continue;
        }
        cycles += common::check_purity(&p, &wfc).map_err(|e| format!("{e}\n{}", common::render(&g)))?;
        checked += 1;
    }
    Ok(format!("20 branchy programs, {cycles} cycles compared"))
}

fn workload_stats(seen: &mut Seen) -> Vec<(&'static str, Mode, StatsSnapshot)> {
    let jobs: Vec<(workloads::Workload, Mode)> =
        workloads::all().into_iter().flat_map(|w| Mode::ALL.into_iter().map(move |m| (w.clone(), m))).collect();
    let out: Vec<_> = jobs
        .par_iter()
        .map(|(w, m)| {
            let r = Machine::for_program(MachineConfig::with_mode(*m), &w.program()).run(DEFAULT_MAX_CYCLES);
            assert!(r.halted, "{} {m} did not halt", w.name);
            (w.name, *m, r.stats)
        })
        .collect();
    for (name, m, s) in &out {
        seen.stats(&format!("{name} {m}"), s, true);
    }
    out
}

fn occupancy_bounds(seen: &Seen) -> Outcome {
    let [d, i, dt, it] = seen.max_occupancy;
    let detail = format!("max D={d} I={i} dTLB={dt} iTLB={it}, worst-case full events={}", seen.worst_case_full_events);
    if d <= D_BOUND && dt <= D_BOUND && i <= I_BOUND && it <= I_BOUND && seen.worst_case_full_events == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn performance(runs: &[(&'static str, Mode, StatsSnapshot)]) -> Outcome {
    let ipc = |name: &str, mode: Mode| runs.iter().find(|r| r.0 == name && r.1 == mode).map(|r| r.2.ipc).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for name in workloads::NAMES {
        let rel = ipc(name, Mode::Wfc) / ipc(name, Mode::Baseline);
        ok &= (0.90..=1.10).contains(&rel);
        notes.push(format!("{name}={rel:.3}"));
    }
    let streaming = runs.iter().find(|r| r.0 == "streaming" && r.1 == Mode::Wfc).unwrap();
    let shi = streaming.2.shadow_hit_fraction(ShadowKind::I).unwrap_or(0.0);
    ok &= shi > 0.5;
    notes.push(format!("streaming shadow-I hits={shi:.3}"));
    if ok {
        Ok(notes.join(" "))
    } else {
        Err(notes.join(" "))
    }
}

fn brute_percentile(mut samples: Vec<usize>, p: f64) -> usize {
    samples.sort_unstable();
    let n = samples.len();
    let i = (0..n).find(|&i| (i + 1) as f64 / n as f64 >= p).unwrap_or(n - 1);
    samples[i]
}

fn telemetry_integrity(seen: &Seen) -> Outcome {
    if !seen.unbalanced.is_empty() {
        return Err(format!("unbalanced allocations in {}", seen.unbalanced.join(", ")));
    }
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let strategy = prop::collection::vec((0usize..300, 1u64..50), 1..60);
    runner
        .run(&strategy, |runs| {
            let mut h = Histogram::default();
            let mut flat = Vec::new();
            for &(v, n) in &runs {
                h.record(v, n);
                flat.extend(std::iter::repeat_n(v, n as usize));
            }
            prop_assert_eq!(percentile(&h, 0.9999).unwrap(), brute_percentile(flat, 0.9999));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} runs balanced; 1000 histograms match the sort oracle", seen.runs))
}

fn main() {
    let mut seen = Seen::default();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(d) => format!("criterion {n} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => format!("criterion {n} {name}: FAIL ({secs:.1}s) {d}"),
        };
        println!("{line}");
        results.push((n, name, r, secs));
    };
    timed(1, "security matrix", &mut || security_matrix(&mut seen));
    timed(2, "coverage matrix", &mut || coverage_matrix(&mut seen));
    timed(3, "architectural oracle", &mut architectural_oracle);
    timed(4, "committed-structure purity", &mut purity);
    let mut runs = Vec::new();
    timed(5, "occupancy bounds", &mut || {
        runs = workload_stats(&mut seen);
        occupancy_bounds(&seen)
    });
    timed(6, "performance", &mut || performance(&runs));
    timed(7, "telemetry integrity", &mut || telemetry_integrity(&seen));
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
