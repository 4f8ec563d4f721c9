//! Attack scenarios, side-channel decoders and leak scoring.

pub mod build;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MachineConfig;
use crate::cpu::Machine;
use crate::memsys::CacheGeometry;
use crate::safespec::{FullPolicy, Mode, ShadowKind};
use crate::telemetry::StatsSnapshot;
pub use build::{build, BuiltAttack, Poison};

pub const DEFAULT_SECRET: &[u8; 16] = b"The Magic Words!";
/// Accuracy a guesser reaches by chance, scaled to a few bytes.
pub const CHANCE_BOUND: f64 = 3.0 / 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SpectreV1,
    SpectreV2,
    Meltdown,
    #[serde(rename = "icache-variant")]
    ICache,
    TsaDtlb,
    TsaDcache,
}

impl Scenario {
    pub const ALL: [Scenario; 6] =
        [Scenario::SpectreV1, Scenario::SpectreV2, Scenario::Meltdown, Scenario::ICache, Scenario::TsaDtlb, Scenario::TsaDcache];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SpectreV1 => "spectre-v1",
            Scenario::SpectreV2 => "spectre-v2",
            Scenario::Meltdown => "meltdown",
            Scenario::ICache => "icache-variant",
            Scenario::TsaDtlb => "tsa-dtlb",
            Scenario::TsaDcache => "tsa-dcache",
        }
    }

    pub fn is_tsa(self) -> bool {
        matches!(self, Scenario::TsaDtlb | Scenario::TsaDcache)
    }

    /// The shadow table a TSA trojan contends for.
    fn contended(self) -> Option<ShadowKind> {
        match self {
            Scenario::TsaDtlb => Some(ShadowKind::DTlb),
            Scenario::TsaDcache => Some(ShadowKind::D),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, AttackError> {
        Scenario::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| AttackError::UnknownScenario(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "leaks")]
    Leaks,
    #[serde(rename = "no-leak")]
    NoLeak,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Leaks => "leaks",
            Verdict::NoLeak => "no-leak",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("unknown scenario `{0}` (expected one of spectre-v1, spectre-v2, meltdown, icache-variant, tsa-dtlb, tsa-dcache)")]
    UnknownScenario(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("secret must not be empty")]
    EmptySecret,
    #[error("{scenario} byte {byte}: simulation budget of {budget} cycles exhausted")]
    BudgetExhausted { scenario: String, byte: usize, budget: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub scenario: String,
    pub mode: String,
    pub preset: String,
    pub full_policy: String,
    pub trials: usize,
    pub secret: Vec<u8>,
    /// `None` where the channel gave no unambiguous answer.
    pub recovered: Vec<Option<u8>>,
    pub accuracy: f64,
    pub verdict: Verdict,
    pub expected: Verdict,
    /// Decision threshold used for each byte.
    pub threshold_cycles: Vec<f64>,
    /// Receiver timings per byte: 256 probe latencies, or the calibration
    /// and eight bit windows for TSA scenarios.
    pub timings: Vec<Vec<u64>>,
    pub cycles: u64,
    /// Largest occupancy seen per shadow table, in D, I, dTLB, iTLB order.
    pub max_occupancy: [usize; 4],
    pub full_events: u64,
    pub allocations_balanced: bool,
}

impl LeakReport {
    pub fn matches_expected(&self) -> bool {
        self.verdict == self.expected
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Flush+reload decoding: the unique slot faster than `threshold`.
pub fn flush_reload_decode(timings: &[u64], threshold: f64) -> Option<u8> {
    let mut fast = timings.iter().enumerate().filter(|(_, &t)| (t as f64) < threshold);
    match (fast.next(), fast.next()) {
        (Some((i, _)), None) => u8::try_from(i).ok(),
        _ => None,
    }
}

/// Midpoint of the L1 hit and memory latencies.
pub fn default_threshold(config: &MachineConfig) -> f64 {
    ((config.memory.l1d.hit_latency + config.memory.mem_latency) / 2) as f64
}

/// Prime+probe decoding: the unique set whose probe shows an eviction.
/// `set_timings[s]` is the time to re-read every primed way of set `s`.
pub fn prime_probe_decode(set_timings: &[u64], geometry: &CacheGeometry, mem_latency: u32) -> Option<usize> {
    let hit = geometry.hit_latency as u64 * geometry.ways as u64;
    let margin = (mem_latency as u64).saturating_sub(geometry.hit_latency as u64) / 2;
    let mut evicted = set_timings.iter().enumerate().filter(|(_, &t)| t > hit + margin);
    match (evicted.next(), evicted.next()) {
        (Some((s, _)), None) => Some(s),
        _ => None,
    }
}

/// TSA decoding: bit b is set when window b + 1 took longer than the
/// calibration window 0.
pub fn tsa_decode(windows: &[u64]) -> u8 {
    let calib = windows[0];
    windows[1..].iter().enumerate().fold(0u8, |acc, (b, &t)| acc | (((t > calib) as u8) << b))
}

fn median(v: &[u64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Verdict the protection model predicts for a scenario on a machine.
pub fn expected_verdict(scenario: Scenario, config: &MachineConfig) -> Verdict {
    let mode = config.shadow.mode;
    let leaks = match scenario {
        Scenario::SpectreV1 | Scenario::SpectreV2 | Scenario::ICache => mode == Mode::Baseline,
        Scenario::Meltdown => mode != Mode::Wfc,
        Scenario::TsaDcache | Scenario::TsaDtlb => {
            let kind = scenario.contended().expect("tsa kind");
            let trojan = if scenario == Scenario::TsaDtlb { build::TSA_TROJAN_PAGES } else { build::TSA_TROJAN_LINES };
            mode.shadowed()
                && config.shadow.full_policy == FullPolicy::Block
                && (config.shadow.capacities[kind.index()] as u64) < trojan
        }
    };
    if leaks {
        Verdict::Leaks
    } else {
        Verdict::NoLeak
    }
}

/// Outcome of one run of one byte's program.
#[derive(Clone, Debug)]
pub struct ByteRun {
    pub timings: Vec<u64>,
    pub stats: StatsSnapshot,
    pub state: crate::isa::ArchState,
}

/// Majority guess, decision threshold and the last trial of one byte.
type ByteOutcome = (Option<u8>, f64, ByteRun);

pub fn run_built(built: &BuiltAttack, config: &MachineConfig, budget: u64) -> Option<ByteRun> {
    let mut m = Machine::new(*config, &built.program, built.page_table.clone());
    for p in &built.prep {
        m.bpu.poison(p.pc, p.target, p.taken);
    }
    let out = m.run(budget);
    if !out.halted {
        return None;
    }
    let timings = (0..built.timing_words).map(|i| out.state.mem.read_u64(build::TIMING + 8 * i as u64)).collect();
    Some(ByteRun { timings, stats: out.stats, state: out.state })
}

fn decode(scenario: Scenario, timings: &[u64], config: &MachineConfig) -> (Option<u8>, f64) {
    match scenario {
        Scenario::TsaDcache | Scenario::TsaDtlb => (Some(tsa_decode(timings)), timings[0] as f64),
        Scenario::ICache => {
            let gap = (config.memory.mem_latency - config.memory.l1i.hit_latency) as f64 / 2.0;
            let t = median(timings) - gap;
            (flush_reload_decode(timings, t), t)
        }
        _ => {
            let t = default_threshold(config);
            (flush_reload_decode(timings, t), t)
        }
    }
}

/// Runs `scenario` against `secret` on `config`. Each byte is attacked on a
/// fresh machine; `trials` repeats every byte and keeps the answer most
/// trials agree on (ties go to the earliest trial).
pub fn run_attack_with(
    scenario: Scenario,
    config: &MachineConfig,
    secret: &[u8],
    trials: usize,
    budget: u64,
) -> Result<LeakReport, AttackError> {
    if trials == 0 {
        return Err(AttackError::NoTrials);
    }
    if secret.is_empty() {
        return Err(AttackError::EmptySecret);
    }
    let per_byte: Vec<Result<ByteOutcome, AttackError>> = (0..secret.len())
        .into_par_iter()
        .map(|k| {
            let built = build(scenario, secret, k);
            let mut votes: Vec<(Option<u8>, usize)> = Vec::new();
            let mut last = None;
            for _ in 0..trials {
                let run = run_built(&built, config, budget).ok_or_else(|| AttackError::BudgetExhausted {
                    scenario: scenario.name().to_string(),
                    byte: k,
                    budget,
                })?;
                let (guess, threshold) = decode(scenario, &run.timings, config);
                match votes.iter_mut().find(|(g, _)| *g == guess) {
                    Some(v) => v.1 += 1,
                    None => votes.push((guess, 1)),
                }
                last = Some((threshold, run));
            }
            let best = votes.iter().max_by_key(|&&(_, n)| n).map(|&(g, n)| (g, n)).expect("at least one trial");
            let winner = votes.iter().find(|&&(_, n)| n == best.1).expect("winner").0;
            let (threshold, run) = last.expect("at least one trial");
            Ok((winner, threshold, run))
        })
        .collect();
    let mut report = LeakReport {
        scenario: scenario.name().to_string(),
        mode: config.shadow.mode.name().to_string(),
        preset: config.shadow.preset.name().to_string(),
        full_policy: config.shadow.full_policy.name().to_string(),
        trials,
        secret: secret.to_vec(),
        recovered: Vec::new(),
        accuracy: 0.0,
        verdict: Verdict::NoLeak,
        expected: expected_verdict(scenario, config),
        threshold_cycles: Vec::new(),
        timings: Vec::new(),
        cycles: 0,
        max_occupancy: [0; 4],
        full_events: 0,
        allocations_balanced: true,
    };
    let mut correct = 0;
    for (k, r) in per_byte.into_iter().enumerate() {
        let (guess, threshold, run) = r?;
        if guess == Some(secret[k]) {
            correct += 1;
        }
        report.recovered.push(guess);
        report.threshold_cycles.push(threshold);
        report.timings.push(run.timings);
        report.cycles += run.stats.cycles;
        for kind in ShadowKind::ALL {
            let m = run.stats.histogram(kind).max().unwrap_or(0);
            report.max_occupancy[kind.index()] = report.max_occupancy[kind.index()].max(m);
        }
        report.full_events += run.stats.total_full_events();
        report.allocations_balanced &= run.stats.allocations_balanced();
    }
    report.accuracy = correct as f64 / secret.len() as f64;
    report.verdict = if report.accuracy > CHANCE_BOUND { Verdict::Leaks } else { Verdict::NoLeak };
    Ok(report)
}

/// The machine each scenario is judged on for `mode`: the default machine,
/// except that TSA scenarios use the `sized` preset when shadowed.
pub fn scenario_config(scenario: Scenario, mode: Mode) -> MachineConfig {
    let mut c = MachineConfig::with_mode(mode);
    if scenario.is_tsa() {
        c.shadow = crate::safespec::ShadowConfig::with_preset(mode, crate::safespec::Preset::Sized, FullPolicy::Block);
    }
    c
}

pub fn run_attack(scenario: Scenario, mode: Mode, trials: usize) -> Result<LeakReport, AttackError> {
    run_attack_with(scenario, &scenario_config(scenario, mode), DEFAULT_SECRET, trials, crate::config::DEFAULT_MAX_CYCLES)
}
