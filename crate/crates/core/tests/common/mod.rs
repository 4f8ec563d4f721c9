//! Random terminating programs for the cross-model tests.
#![allow(dead_code)]

use proptest::prelude::*;
use safespec::config::MachineConfig;
use safespec::cpu::Machine;
use safespec::isa::{assemble, interpret, interpret_traced, Program, TraceKind, TraceRecord};
use safespec::memsys::{line_of, MemorySystem, PageTable, Side};
use safespec::safespec::Mode;

pub const DATA: u64 = 0x10000;
pub const DATA_BYTES: u64 = 0x2000;
pub const RO: u64 = 0x14000;
pub const PRIV: u64 = 0x15000;
pub const TABLE: u64 = 0x16000;

/// r1 holds DATA, r12 counts loops, r13 is the address scratch register.
/// Everything else is fair game.
#[derive(Clone, Debug)]
pub enum Block {
    Alu { op: &'static str, dst: u8, a: u8, b: Result<u8, i64> },
    Movi { dst: u8, imm: i64 },
    Load { dst: u8, idx: u8, off: u16 },
    Store { src: u8, idx: u8, off: u16 },
    Flush { idx: u8 },
    /// Conditional skip over `body`.
    If { op: &'static str, a: u8, b: Result<u8, i64>, body: Vec<Block> },
    Loop { trips: u8, body: Vec<Block> },
    /// Indirect jump through the table, picking one of two landing pads.
    Switch { sel: u8, left: Vec<Block>, right: Vec<Block> },
    Fence,
    /// Load from a page the program may not read or that is unmapped.
    Fault { kind: u8 },
    /// Store to the read-only page.
    StoreRo { src: u8 },
}

const ALU: [&str; 8] = ["ADD", "SUB", "AND", "OR", "XOR", "SHL", "SHR", "MUL"];
const BR: [&str; 3] = ["BEQ", "BNE", "BLT"];

fn reg() -> impl Strategy<Value = u8> {
    prop_oneof![2u8..12, Just(14u8), Just(15u8)]
}

fn src2() -> impl Strategy<Value = Result<u8, i64>> {
    prop_oneof![reg().prop_map(Ok), (-8i64..64).prop_map(Err)]
}

fn leaf(faults: bool) -> BoxedStrategy<Block> {
    let alu = (0..ALU.len(), reg(), reg(), src2()).prop_map(|(o, dst, a, b)| Block::Alu { op: ALU[o], dst, a, b });
    let movi = (reg(), any::<i64>()).prop_map(|(dst, imm)| Block::Movi { dst, imm });
    let load = (reg(), reg(), 0u16..8).prop_map(|(dst, idx, off)| Block::Load { dst, idx, off });
    let store = (reg(), reg(), 0u16..8).prop_map(|(src, idx, off)| Block::Store { src, idx, off });
    let flush = reg().prop_map(|idx| Block::Flush { idx });
    let fault_w = if faults { 1 } else { 0 };
    prop_oneof![
        60 => alu,
        20 => movi,
        40 => load,
        20 => store,
        8 => flush,
        4 => Just(Block::Fence),
        fault_w => (0u8..3).prop_map(|kind| Block::Fault { kind }),
        fault_w => reg().prop_map(|src| Block::StoreRo { src }),
    ]
    .boxed()
}

fn blocks(depth: u32, faults: bool) -> BoxedStrategy<Vec<Block>> {
    if depth == 0 {
        return prop::collection::vec(leaf(faults), 1..5).boxed();
    }
    let inner = blocks(depth - 1, faults);
    let branch = (0..BR.len(), reg(), src2(), inner.clone())
        .prop_map(|(o, a, b, body)| Block::If { op: BR[o], a, b, body });
    let lp = (1u8..16, inner.clone()).prop_map(|(trips, body)| Block::Loop { trips, body });
    let sw = (reg(), inner.clone(), inner).prop_map(|(sel, left, right)| Block::Switch { sel, left, right });
    let item = prop_oneof![6 => leaf(faults), 3 => branch, 2 => lp, 1 => sw];
    prop::collection::vec(item, 1..8).boxed()
}

/// A program is its blocks plus the initial data words and an optional handler.
#[derive(Clone, Debug)]
pub struct Gen {
    pub blocks: Vec<Block>,
    pub words: Vec<u64>,
    pub handler: bool,
}

pub fn gen(faults: bool) -> impl Strategy<Value = Gen> {
    (blocks(2, faults), prop::collection::vec(any::<u64>(), 16..64), any::<bool>())
        .prop_map(|(blocks, words, handler)| Gen { blocks, words, handler })
}

struct Emit {
    out: String,
    labels: usize,
    table: Vec<String>,
}

impl Emit {
    fn label(&mut self) -> String {
        self.labels += 1;
        format!("g{}", self.labels)
    }

    fn line(&mut self, s: String) {
        self.out.push_str(&s);
        self.out.push('\n');
    }

    /// r13 = DATA + (r[idx] masked to an aligned offset in the segment).
    fn addr(&mut self, idx: u8) {
        self.line(format!("AND r13, r{idx}, {}", DATA_BYTES - 64));
        self.line("ADD r13, r13, r1".into());
    }

    fn blocks(&mut self, bs: &[Block], in_loop: bool) {
        for b in bs {
            self.block(b, in_loop);
        }
    }

    fn block(&mut self, b: &Block, in_loop: bool) {
        let s2 = |b: &Result<u8, i64>| match b {
            Ok(r) => format!("r{r}"),
            Err(v) => v.to_string(),
        };
        match b {
            Block::Alu { op, dst, a, b } => self.line(format!("{op} r{dst}, r{a}, {}", s2(b))),
            Block::Movi { dst, imm } => self.line(format!("MOVI r{dst}, {imm}")),
            Block::Load { dst, idx, off } => {
                self.addr(*idx);
                self.line(format!("LOAD r{dst}, [r13+{}]", off * 8));
            }
            Block::Store { src, idx, off } => {
                self.addr(*idx);
                self.line(format!("STORE [r13+{}], r{src}", off * 8));
            }
            Block::Flush { idx } => {
                self.addr(*idx);
                self.line("CLFLUSH [r13]".into());
            }
            Block::Fence => self.line("FENCE".into()),
            Block::Fault { kind } => {
                let at = [PRIV, 0x7f_0000, RO + 3][*kind as usize];
                self.line(format!("MOVI r13, {at}"));
                self.line("LOAD r14, [r13]".into());
            }
            Block::StoreRo { src } => {
                self.line(format!("MOVI r13, {RO}"));
                self.line(format!("STORE [r13+8], r{src}"));
            }
            Block::If { op, a, b, body } => {
                let end = self.label();
                self.line(format!("{op} r{a}, {}, {end}", s2(b)));
                self.blocks(body, in_loop);
                self.line(format!("{end}:"));
            }
            Block::Loop { trips, body } if !in_loop => {
                let top = self.label();
                self.line("MOVI r12, 0".into());
                self.line(format!("{top}:"));
                self.blocks(body, true);
                self.line("ADD r12, r12, 1".into());
                self.line(format!("BLT r12, {trips}, {top}"));
            }
            Block::Loop { body, .. } => self.blocks(body, in_loop),
            Block::Switch { sel, left, right } => {
                let (l, r, end) = (self.label(), self.label(), self.label());
                let slot = self.table.len() as u64;
                self.table.push(l.clone());
                self.table.push(r.clone());
                self.line(format!("AND r13, r{sel}, 8"));
                self.line(format!("ADD r13, r13, {}", TABLE + slot * 8));
                self.line("LOAD r13, [r13]".into());
                self.line("JMPI r13".into());
                self.line(format!("{l}:"));
                self.blocks(left, in_loop);
                self.line(format!("JMP {end}"));
                self.line(format!("{r}:"));
                self.blocks(right, in_loop);
                self.line(format!("{end}:"));
            }
        }
    }
}

pub fn render(g: &Gen) -> String {
    let mut e = Emit { out: String::new(), labels: 0, table: Vec::new() };
    if g.handler {
        e.line(".fault_handler on_fault".into());
    }
    e.line(format!("MOVI r1, {DATA}"));
    for r in 2..12 {
        e.line(format!("MOVI r{r}, {}", r * 8 + 3));
    }
    e.blocks(&g.blocks, false);
    e.line("HALT".into());
    if g.handler {
        e.line("on_fault: ADD r15, r15, 1".into());
        e.line("HALT".into());
    }
    let words: Vec<String> = g.words.iter().map(|w| w.to_string()).collect();
    e.line(format!(".data {DATA} rw"));
    e.line(format!(".word {}", words.join(", ")));
    e.line(format!(".zero {}", DATA_BYTES - 8 * g.words.len() as u64));
    e.line(format!(".data {RO} ro"));
    e.line(".word 11, 22, 33".into());
    e.line(format!(".data {PRIV} priv"));
    e.line(".word 42".into());
    if !e.table.is_empty() {
        e.line(format!(".data {TABLE} ro"));
        let t = e.table.join(", ");
        e.line(format!(".word {t}"));
    }
    e.out
}

pub const STEPS: u64 = 1_000_000;

/// Runs `program` through the interpreter and every timing mode and reports
/// the first architectural disagreement.
pub fn cross_check(program: &Program, page_table: &PageTable, configs: &[MachineConfig]) -> Result<(), String> {
    let golden = interpret(program, STEPS, page_table);
    if !golden.halted {
        return Err("interpreter did not halt".into());
    }
    for c in configs {
        let mut m = Machine::new(*c, program, page_table.clone());
        let out = m.run(STEPS * 50);
        if !out.halted {
            return Err(format!("{} did not halt", c.shadow.mode));
        }
        if !out.state.same_architecture(&golden) {
            return Err(format!("{} disagrees with the interpreter", c.shadow.mode));
        }
        if !out.stats.allocations_balanced() {
            return Err(format!("{} shadow allocations do not balance", c.shadow.mode));
        }
    }
    Ok(())
}

pub fn mode_configs() -> Vec<MachineConfig> {
    Mode::ALL.iter().map(|&m| MachineConfig::with_mode(m)).collect()
}

pub fn assemble_gen(g: &Gen) -> Program {
    let src = render(g);
    assemble(&src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

/// The committed effect of one retired instruction on a speculation-free
/// memory system, derived from the interpreter trace alone.
pub fn replay_one(mem: &mut MemorySystem, r: &TraceRecord) {
    if r.faulted {
        return;
    }
    mem.commit_tlb_access(Side::Inst, r.pc);
    mem.commit_access(Side::Inst, line_of(r.pc));
    match r.kind {
        TraceKind::Plain => {}
        TraceKind::Load { va, pa } | TraceKind::Store { va, pa } => {
            mem.commit_tlb_access(Side::Data, va);
            mem.commit_access(Side::Data, line_of(pa));
        }
        TraceKind::Flush { va, pa } => {
            mem.commit_tlb_access(Side::Data, va);
            mem.clflush(line_of(pa));
        }
    }
}

/// Steps `config` (a WFC machine) cycle by cycle and, after every cycle,
/// compares its committed caches and TLBs with a replay of the instructions
/// committed so far.
pub fn check_purity(program: &Program, config: &MachineConfig) -> Result<u64, String> {
    let pt = PageTable::for_program(program);
    let (golden, trace) = interpret_traced(program, STEPS, &pt);
    if !golden.halted {
        return Err("interpreter did not halt".into());
    }
    let mut m = Machine::new(*config, program, pt.clone());
    m.enable_commit_log();
    let mut replay = MemorySystem::new(config.memory, pt);
    let mut done = 0;
    while !m.halted() {
        if m.cycle() > STEPS * 50 {
            return Err("machine did not halt".into());
        }
        m.step();
        for rec in &m.commit_log()[done..] {
            let t = trace.get(done).ok_or("machine committed past the interpreter")?;
            if (t.pc, t.faulted) != (rec.pc, rec.faulted) {
                return Err(format!("commit {done} at cycle {}: pc {:#x} vs trace {:#x}", rec.cycle, rec.pc, t.pc));
            }
            replay_one(&mut replay, t);
            done += 1;
        }
        if m.committed_snapshot() != replay.snapshot() {
            return Err(format!("committed state diverges at cycle {} after {done} commits", m.cycle() - 1));
        }
    }
    if done != trace.len() {
        return Err(format!("machine committed {done} of {} instructions", trace.len()));
    }
    Ok(m.cycle())
}
