//! Command-line front end. `run` returns the process exit code so tests can
//! drive it in-process.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::attacks::{self, Scenario};
use crate::config::{MachineConfig, DEFAULT_MAX_CYCLES};
use crate::cpu::Machine;
use crate::isa::{self, Program};
use crate::memsys::PageTable;
use crate::safespec::{FullPolicy, Mode, Preset, ShadowConfig, ShadowKind};
use crate::telemetry::{geomean, percentile, StatsSnapshot};
use crate::workloads;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_PROGRAM: i32 = 65;
pub const EXIT_IO: i32 = 74;

pub const BUDGET_ENV: &str = "SAFESPEC_MAX_CYCLES";

#[derive(Parser, Debug)]
#[command(name = "safespec", version, about = "Shadow-state speculative execution simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one program and write its statistics.
    Simulate(SimulateArgs),
    /// Run an attack scenario and check the verdict against the expected matrix.
    Attack(AttackArgs),
    /// Run the bundled workloads under several modes.
    Sweep(SweepArgs),
    /// Quick internal consistency checks.
    Selftest,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Machine config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Assembly source, or a JSON program when the name ends in `.json`.
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    stats_out: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = "wfc")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Shadow sizing; TSA scenarios default to `sized`, the rest to `worst-case`.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    full_policy: Option<FullPolicy>,
    #[arg(long)]
    secret: Option<String>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated workload names.
    #[arg(long, value_delimiter = ',', default_values_t = workloads::NAMES.map(String::from))]
    workloads: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = Mode::ALL.to_vec())]
    modes: Vec<Mode>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Budget from the environment, then the config file, then the default.
pub fn budget(from_config: Option<u64>) -> u64 {
    std::env::var(BUDGET_ENV).ok().and_then(|v| v.trim().parse().ok()).or(from_config).unwrap_or(DEFAULT_MAX_CYCLES)
}

fn load_config(path: Option<&Path>) -> Result<(MachineConfig, Option<u64>), String> {
    match path {
        None => Ok((MachineConfig::default(), None)),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            MachineConfig::from_toml(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn load_program(path: &Path) -> Result<Program, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        isa::program_from_json(&text)
    } else {
        isa::assemble(&text).map_err(|e| e.to_string())
    }
    .map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), i32> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| {
            eprintln!("error: {}: {e}", dir.display());
            EXIT_IO
        })?;
    }
    fs::write(path, text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_IO
    })
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Attack(a) => attack(a),
        Command::Sweep(a) => sweep(a),
        Command::Selftest => Ok(selftest()),
    };
    result.unwrap_or_else(|code| code)
}

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_USAGE
}

fn simulate(a: SimulateArgs) -> Result<i32, i32> {
    let (mut config, file_budget) = load_config(a.config.as_deref()).map_err(usage)?;
    if let Some(mode) = a.mode {
        config.shadow.mode = mode;
    }
    let program = load_program(&a.program).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_PROGRAM
    })?;
    let out = Machine::for_program(config, &program).run(budget(file_budget));
    write(&a.stats_out, &out.stats.to_json())?;
    println!(
        "{}: {} cycles, {} uops, ipc {:.4}{}",
        config.shadow.mode,
        out.stats.cycles,
        out.stats.committed_uops,
        out.stats.ipc,
        if out.halted { "" } else { " (budget exhausted)" }
    );
    Ok(if out.halted { EXIT_OK } else { EXIT_BUDGET })
}

fn attack(a: AttackArgs) -> Result<i32, i32> {
    let scenario: Scenario = a.scenario.parse().map_err(usage)?;
    let mut config = attacks::scenario_config(scenario, a.mode);
    if a.preset.is_some() || a.full_policy.is_some() {
        let preset = a.preset.unwrap_or(config.shadow.preset);
        let policy = a.full_policy.unwrap_or(config.shadow.full_policy);
        config.shadow = ShadowConfig::with_preset(a.mode, preset, policy);
    }
    let secret = a.secret.as_deref().map(str::as_bytes).unwrap_or(attacks::DEFAULT_SECRET);
    let report = attacks::run_attack_with(scenario, &config, secret, a.trials, budget(None)).map_err(usage)?;
    if let Some(path) = &a.report_out {
        write(path, &report.to_json())?;
    }
    println!(
        "{} {} ({} preset, {}): verdict {} expected {} accuracy {:.3}",
        scenario,
        a.mode,
        report.preset,
        report.full_policy,
        report.verdict,
        report.expected,
        report.accuracy
    );
    Ok(if report.matches_expected() { EXIT_OK } else { EXIT_MISMATCH })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn summary_row(workload: &str, s: &StatsSnapshot, base_ipc: Option<f64>) -> String {
    let rel = base_ipc.filter(|&b| b > 0.0).map(|b| s.ipc / b);
    let mut row = format!("{workload},{},{},{:.6},{}", s.mode, s.cycles, s.ipc, fmt_opt(rel));
    for k in ShadowKind::ALL {
        row += &format!(",{}", fmt_opt(s.shadow_hit_fraction(k)));
    }
    for k in ShadowKind::ALL {
        row += &format!(",{}", fmt_opt(s.commit_rate(k)));
    }
    for k in ShadowKind::ALL {
        row += &format!(",{}", percentile(s.histogram(k), 0.9999).unwrap_or(0));
    }
    row += &format!(",{}", s.total_full_events());
    row
}

fn summary_header() -> String {
    let mut h = String::from("workload,mode,cycles,ipc,relative_ipc");
    for prefix in ["shadow_hit", "commit_rate", "occupancy_p9999"] {
        for k in ShadowKind::ALL {
            h += &format!(",{prefix}_{}", k.name());
        }
    }
    h + ",full_events"
}

fn sweep(a: SweepArgs) -> Result<i32, i32> {
    let (base, file_budget) = load_config(a.config.as_deref()).map_err(usage)?;
    let names: Vec<&str> = a.workloads.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(usage("empty workload set"));
    }
    if a.modes.is_empty() {
        return Err(usage("empty mode set"));
    }
    let mut set = Vec::new();
    for n in names {
        set.push(workloads::by_name(n).ok_or_else(|| usage(format!("unknown workload `{n}`")))?);
    }
    let mut modes = a.modes.clone();
    modes.dedup();
    let limit = budget(file_budget);
    let jobs: Vec<(usize, Mode)> = (0..set.len()).flat_map(|w| modes.iter().map(move |&m| (w, m))).collect();
    let programs: Vec<Program> = set.iter().map(|w| w.program()).collect();
    let results: Vec<(usize, Mode, StatsSnapshot, bool)> = jobs
        .par_iter()
        .map(|&(w, m)| {
            let mut c = base;
            c.shadow.mode = m;
            let out = Machine::for_program(c, &programs[w]).run(limit);
            (w, m, out.stats, out.halted)
        })
        .collect();

    fs::create_dir_all(&a.out_dir).map_err(|e| usage(format!("{}: {e}", a.out_dir.display())))?;
    let mut csv = summary_header() + "\n";
    let mut all_halted = true;
    for (w, wl) in set.iter().enumerate() {
        let base_ipc = results.iter().find(|r| r.0 == w && r.1 == Mode::Baseline).map(|r| r.2.ipc);
        for (_, m, stats, halted) in results.iter().filter(|r| r.0 == w) {
            all_halted &= *halted;
            write(&a.out_dir.join(format!("{}-{}.json", wl.name, m.name())), &stats.to_json())?;
            csv += &summary_row(wl.name, stats, base_ipc);
            csv += "\n";
        }
    }
    for &m in &modes {
        let rel: Vec<f64> = (0..set.len())
            .filter_map(|w| {
                let b = results.iter().find(|r| r.0 == w && r.1 == Mode::Baseline)?.2.ipc;
                let s = results.iter().find(|r| r.0 == w && r.1 == m)?.2.ipc;
                (b > 0.0).then(|| s / b)
            })
            .collect();
        if let Some(g) = geomean(&rel) {
            csv += &format!("geomean,{},,,{g:.6}\n", m.name());
        }
    }
    write(&a.out_dir.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(if all_halted { EXIT_OK } else { EXIT_BUDGET })
}

fn check(name: &str, ok: bool) -> bool {
    println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    ok
}

fn selftest() -> i32 {
    let mut ok = true;
    ok &= check("geomean(2, 8) = 4", geomean(&[2.0, 8.0]).is_some_and(|g| (g - 4.0).abs() < 1e-12));
    let src = "MOVI r1, 0\nMOVI r2, 0\nloop: ADD r2, r2, r1\nSTORE [r0+0x10000], r2\nADD r1, r1, 1\nBLT r1, 50, loop\nLOAD r3, [r0+0x10000]\nHALT\n.data 0x10000 rw\n.zero 64";
    let program = isa::assemble(src).expect("selftest program");
    let reference = isa::interpret(&program, 100_000, &PageTable::for_program(&program));
    for mode in Mode::ALL {
        let out = Machine::for_program(MachineConfig::with_mode(mode), &program).run(1_000_000);
        ok &= check(&format!("{mode} matches the interpreter"), out.halted && out.state.same_architecture(&reference));
        ok &= check(&format!("{mode} shadow allocations balance"), out.stats.allocations_balanced());
    }
    let c = MachineConfig {
        shadow: ShadowConfig::with_preset(Mode::Wfc, Preset::WorstCase, FullPolicy::Block),
        ..MachineConfig::default()
    };
    let out = Machine::for_program(c, &program).run(1_000_000);
    ok &= check("worst-case preset never fills", out.stats.total_full_events() == 0);
    if ok {
        EXIT_OK
    } else {
        EXIT_MISMATCH
    }
}
