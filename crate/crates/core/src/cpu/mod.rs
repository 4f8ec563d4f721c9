//! The out-of-order core.
//!
//! Per cycle, in order: memory responses, commit, branch resolution (oldest
//! first), WFB release, issue, dispatch, fetch. Instructions are fetched
//! `fetch_depth` cycles before they can dispatch, issue the cycle after
//! dispatch, and commit the cycle after their result is ready.
//!
//! Values are computed functionally at issue; the timing model decides when
//! they become visible. Committed caches and TLBs change according to the
//! mode:
//!
//! * baseline: hits touch LRU at access time, misses fill every level when
//!   the response arrives, even if the requester was squashed.
//! * WFC: all committed-structure changes happen at commit, by replaying the
//!   committed instruction's fetch and data access.
//! * WFB: the same replay happens once no older conditional or indirect
//!   branch is unresolved and the data has arrived.
//!
//! Stores and CLFLUSH touch the committed hierarchy at commit in every mode.

mod exec;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::bpu::Bpu;
use crate::config::MachineConfig;
use crate::isa::{ArchState, Instruction, Opcode, Program, INST_BYTES, NUM_REGS};
use crate::memsys::{line_of, CommittedSnapshot, MemorySystem, PageTable, Side};
use crate::safespec::{Handle, Mode, SafeSpec, ShadowKind};
use crate::telemetry::{structure_of, StatsSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommitRecord {
    pub seq: u64,
    pub pc: u64,
    pub cycle: u64,
    pub faulted: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: ArchState,
    pub stats: StatsSnapshot,
    pub halted: bool,
    pub budget_exhausted: bool,
}

/// Deferred committed-structure update (baseline fills).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Effect {
    Line(Side, u64),
    Tlb(Side, u64),
}

#[derive(Clone, Debug)]
struct Uop {
    seq: u64,
    pc: u64,
    inst: Instruction,
    pred_next: u64,
    producers: [Option<u64>; 2],
    epoch: Option<u64>,
    issued: bool,
    ready_at: u64,
    value: u64,
    resolved: bool,
    taken: bool,
    actual_next: u64,
    va: u64,
    pa: Option<u64>,
    i_handles: Vec<Handle>,
    d_handles: Vec<Handle>,
    i_effect: bool,
    itlb_effect: bool,
    d_effect: bool,
    dtlb_effect: bool,
    i_done: bool,
    d_done: bool,
}

impl Uop {
    fn is_load(&self) -> bool {
        self.inst.op == Opcode::Load
    }

    fn guards_speculation(&self) -> bool {
        self.inst.op.is_conditional() || self.inst.op == Opcode::Jmpi
    }
}

#[derive(Clone, Debug)]
struct FetchedInst {
    idx: usize,
    pc: u64,
    pred_next: u64,
    deliver_at: u64,
    handles: Vec<Handle>,
    i_effect: bool,
    itlb_effect: bool,
}

#[derive(Clone, Debug)]
struct PendingFetch {
    line: u64,
    ready_at: u64,
    handles: Vec<Handle>,
    i_effect: bool,
    itlb_effect: bool,
}

#[derive(Clone, Debug)]
struct FetchState {
    pc: u64,
    stopped: bool,
    pending: Option<PendingFetch>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HighWater {
    pub rob: usize,
    pub iq: usize,
    pub ldq: usize,
    pub stq: usize,
    pub frontend: usize,
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub config: MachineConfig,
    program: Program,
    pub mem: MemorySystem,
    pub bpu: Bpu,
    pub shadow: SafeSpec,
    arch: ArchState,
    cycle: u64,
    next_seq: u64,
    rob: VecDeque<Uop>,
    iq: Vec<u64>,
    stq: VecDeque<u64>,
    ldq_len: usize,
    rename: [Option<u64>; NUM_REGS],
    frontend: VecDeque<FetchedInst>,
    fetch: FetchState,
    unresolved: BTreeSet<u64>,
    resolve_queue: BTreeSet<(u64, u64)>,
    fences_in_rob: usize,
    wfb_cursor: u64,
    wfb_waiting: Vec<u64>,
    events: BTreeMap<u64, Vec<Effect>>,
    pending_lines: HashMap<(Side, u64), u64>,
    pending_tlb: HashMap<(Side, u64), u64>,
    stats: StatsSnapshot,
    retired: u64,
    commit_log: Option<Vec<CommitRecord>>,
    pub high_water: HighWater,
    drained: bool,
    active: bool,
}

impl Machine {
    pub fn new(config: MachineConfig, program: &Program, page_table: PageTable) -> Self {
        config.validate().expect("valid machine config");
        let arch = ArchState::new(program, &page_table);
        Machine {
            mem: MemorySystem::new(config.memory, page_table),
            bpu: Bpu::new(config.bpu),
            shadow: SafeSpec::new(config.shadow),
            stats: StatsSnapshot::new(config.shadow.mode.name()),
            config,
            program: program.clone(),
            arch,
            cycle: 0,
            next_seq: 0,
            rob: VecDeque::new(),
            iq: Vec::new(),
            stq: VecDeque::new(),
            ldq_len: 0,
            rename: [None; NUM_REGS],
            frontend: VecDeque::new(),
            fetch: FetchState { pc: Program::pc_of(0), stopped: false, pending: None },
            unresolved: BTreeSet::new(),
            resolve_queue: BTreeSet::new(),
            fences_in_rob: 0,
            wfb_cursor: 0,
            wfb_waiting: Vec::new(),
            events: BTreeMap::new(),
            pending_lines: HashMap::new(),
            pending_tlb: HashMap::new(),
            retired: 0,
            commit_log: None,
            high_water: HighWater::default(),
            drained: false,
            active: false,
        }
    }

    /// Machine for `program` with its identity page table.
    pub fn for_program(config: MachineConfig, program: &Program) -> Self {
        Machine::new(config, program, PageTable::for_program(program))
    }

    pub fn mode(&self) -> Mode {
        self.config.shadow.mode
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn arch(&self) -> &ArchState {
        &self.arch
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn halted(&self) -> bool {
        self.arch.halted
    }

    /// Instructions retired so far, faulting ones included.
    pub fn retired(&self) -> u64 {
        self.retired
    }

    pub fn enable_commit_log(&mut self) {
        self.commit_log.get_or_insert_with(Vec::new);
    }

    pub fn commit_log(&self) -> &[CommitRecord] {
        self.commit_log.as_deref().unwrap_or(&[])
    }

    pub fn committed_snapshot(&self) -> CommittedSnapshot {
        self.mem.snapshot()
    }

    pub fn rob_len(&self) -> usize {
        self.rob.len()
    }

    /// Installs every code line and code page in the committed L1I/iTLB.
    pub fn warm_code(&mut self) {
        let mut last = None;
        for i in 0..self.program.instructions.len() {
            let pc = Program::pc_of(i);
            if last != Some(line_of(pc)) {
                self.mem.commit_tlb_access(Side::Inst, pc);
                self.mem.commit_access(Side::Inst, line_of(pc));
                last = Some(line_of(pc));
            }
        }
    }

    /// Advances one cycle. Returns whether anything happened; a quiet cycle
    /// means nothing can change until [`Machine::next_wake`].
    pub fn step(&mut self) -> bool {
        if self.arch.halted {
            return false;
        }
        let t = self.cycle;
        self.active = false;
        self.deliver_responses(t);
        self.commit_stage(t);
        if !self.arch.halted {
            self.resolve_stage(t);
            if self.mode() == Mode::Wfb {
                self.wfb_stage(t);
            }
            self.issue_stage(t);
            self.dispatch_stage(t);
            self.fetch_stage(t);
        }
        self.sample(1);
        self.cycle += 1;
        self.arch.cycle = self.cycle;
        if self.arch.halted {
            self.drain();
        }
        debug_assert!(self.check_bounds().is_ok(), "{:?}", self.check_bounds());
        self.active
    }

    /// Earliest future cycle at which a quiet machine can make progress.
    pub fn next_wake(&self) -> Option<u64> {
        let now = self.cycle;
        let mut best: Option<u64> = None;
        let mut consider = |c: u64| {
            if c >= now {
                best = Some(best.map_or(c, |b: u64| b.min(c)));
            }
        };
        for u in &self.rob {
            if u.issued {
                consider(u.ready_at);
            }
        }
        if let Some(f) = self.frontend.front() {
            consider(f.deliver_at);
        }
        if let Some(p) = &self.fetch.pending {
            consider(p.ready_at);
        }
        if let Some(a) = self.shadow.next_arrival() {
            consider(a);
        }
        if let Some((&c, _)) = self.events.first_key_value() {
            consider(c);
        }
        best
    }

    /// Skips quiet cycles up to `target` (exclusive of any activity).
    fn fast_forward(&mut self, target: u64) {
        if target > self.cycle {
            self.sample(target - self.cycle);
            self.cycle = target;
            self.arch.cycle = target;
        }
    }

    /// Runs until HALT commits or `max_cycles` is reached.
    pub fn run(&mut self, max_cycles: u64) -> RunOutcome {
        while !self.arch.halted && self.cycle < max_cycles {
            if !self.step() && !self.arch.halted {
                let wake = self.next_wake().unwrap_or(max_cycles).min(max_cycles);
                self.fast_forward(wake);
            }
        }
        self.drain();
        RunOutcome {
            state: self.arch.clone(),
            stats: self.stats(),
            halted: self.arch.halted,
            budget_exhausted: !self.arch.halted,
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        let mut s = self.stats.clone();
        s.cycles = self.cycle;
        s.recompute_ipc();
        let mut total_full = 0;
        for k in ShadowKind::ALL {
            let c = self.shadow.counters[k.index()].clone();
            total_full += c.full_events;
            s.shadow.insert(k.name().to_string(), c);
        }
        s.full_events.insert(self.config.shadow.full_policy.name().to_string(), total_full);
        s
    }

    fn sample(&mut self, times: u64) {
        let occ = self.shadow.occupancy_sample();
        for k in ShadowKind::ALL {
            self.stats.occupancy.get_mut(k.name()).expect("kind histogram").record(occ[k.index()], times);
        }
    }

    fn count_access(&mut self, kind: ShadowKind, shadow_hit: bool, miss: bool) {
        let a = self.stats.structures.get_mut(structure_of(kind)).expect("structure counters");
        a.accesses += 1;
        if shadow_hit {
            a.shadow_hits += 1;
        } else if miss {
            a.misses += 1;
        }
    }

    /// Squashes whatever is still in flight so every shadow reference is
    /// accounted for.
    fn drain(&mut self) {
        if self.drained {
            return;
        }
        self.squash_after(None);
        self.drained = true;
    }

    fn find(&self, seq: u64) -> Option<usize> {
        self.rob.binary_search_by_key(&seq, |u| u.seq).ok()
    }

    fn deliver_responses(&mut self, t: u64) {
        if !self.shadow.process_arrivals(t).is_empty() {
            self.active = true;
        }
        while let Some((&c, _)) = self.events.first_key_value() {
            if c > t {
                break;
            }
            self.active = true;
            for e in self.events.remove(&c).unwrap_or_default() {
                match e {
                    Effect::Line(side, line) => {
                        self.pending_lines.remove(&(side, line));
                        self.mem.commit_access(side, line);
                    }
                    Effect::Tlb(side, va) => {
                        self.pending_tlb.remove(&(side, va >> crate::memsys::PAGE_SHIFT));
                        self.mem.commit_tlb_access(side, va);
                    }
                }
            }
        }
    }

    fn schedule(&mut self, at: u64, e: Effect) {
        self.events.entry(at).or_default().push(e);
    }

    fn release(&mut self, handles: &mut Vec<Handle>, promoted: bool) {
        if handles.is_empty() {
            return;
        }
        if promoted {
            self.shadow.on_commit(handles);
        } else {
            self.shadow.on_squash(handles);
        }
        handles.clear();
    }

    fn apply_i_effects(&mut self, u: &mut Uop) {
        if u.i_done {
            return;
        }
        u.i_done = true;
        if u.itlb_effect {
            self.mem.commit_tlb_access(Side::Inst, u.pc);
        }
        if u.i_effect {
            self.mem.commit_access(Side::Inst, line_of(u.pc));
        }
        let mut h = std::mem::take(&mut u.i_handles);
        self.release(&mut h, true);
    }

    fn apply_d_effects(&mut self, u: &mut Uop) {
        if u.d_done {
            return;
        }
        u.d_done = true;
        if u.is_load() {
            if let Some(pa) = u.pa {
                if u.dtlb_effect {
                    self.mem.commit_tlb_access(Side::Data, u.va);
                }
                if u.d_effect {
                    self.mem.commit_access(Side::Data, line_of(pa));
                }
            }
        }
        let mut h = std::mem::take(&mut u.d_handles);
        self.release(&mut h, true);
    }

    fn commit_stage(&mut self, t: u64) {
        for _ in 0..self.config.pipeline.commit_width {
            let Some(head) = self.rob.front() else { break };
            if !head.issued || head.ready_at > t || (head.inst.op.is_control() && !head.resolved) {
                break;
            }
            let mut u = self.rob.pop_front().expect("head exists");
            self.active = true;
            self.retired += 1;
            match u.inst.op {
                Opcode::Load => self.ldq_len -= 1,
                Opcode::Store => {
                    self.stq.pop_front();
                }
                Opcode::Fence => self.fences_in_rob -= 1,
                _ => {}
            }
            self.iq.retain(|&s| s != u.seq);
            let fault = match u.inst.op {
                Opcode::Load | Opcode::Store | Opcode::Clflush => {
                    crate::isa::check_access(&self.mem.page_table, u.va, u.inst.op).is_err()
                }
                Opcode::Jmpi => self.program.index_of(u.actual_next).is_none(),
                _ => false,
            };
            if let Some(log) = self.commit_log.as_mut() {
                log.push(CommitRecord { seq: u.seq, pc: u.pc, cycle: t, faulted: fault });
            }
            if fault {
                self.arch.fault_count += 1;
                self.stats.faults += 1;
                let mut h = std::mem::take(&mut u.i_handles);
                h.append(&mut u.d_handles);
                self.release(&mut h, false);
                self.forget_producer(&u);
                self.squash_after(None);
                match self.program.fault_handler_pc() {
                    Some(handler) => {
                        self.arch.pc = handler;
                        self.redirect(handler);
                    }
                    None => {
                        self.arch.pc = u.pc;
                        self.arch.halted = true;
                    }
                }
                break;
            }
            self.stats.committed_uops += 1;
            if u.inst.op.writes_dst() {
                self.arch.regs[u.inst.dst as usize] = u.value;
            }
            self.forget_producer(&u);
            if self.mode().shadowed() {
                self.apply_i_effects(&mut u);
                self.apply_d_effects(&mut u);
            }
            match u.inst.op {
                Opcode::Store => {
                    let pa = u.pa.expect("non-faulting store is mapped");
                    self.arch.mem.write_u64(pa, u.value);
                    self.mem.commit_tlb_access(Side::Data, u.va);
                    self.mem.commit_access(Side::Data, line_of(pa));
                }
                Opcode::Clflush => {
                    let pa = u.pa.expect("non-faulting flush is mapped");
                    self.mem.commit_tlb_access(Side::Data, u.va);
                    self.mem.clflush(line_of(pa));
                }
                _ => {}
            }
            if u.inst.op == Opcode::Halt {
                self.arch.pc = u.pc;
                self.arch.halted = true;
                break;
            }
            self.arch.pc = if u.inst.op.is_control() { u.actual_next } else { u.pc + INST_BYTES };
        }
    }

    fn forget_producer(&mut self, u: &Uop) {
        if u.inst.op.writes_dst() && self.rename[u.inst.dst as usize] == Some(u.seq) {
            self.rename[u.inst.dst as usize] = None;
        }
    }

    /// Removes every ROB entry younger than `keep` (all of them for `None`),
    /// the whole frontend and any pending fetch.
    fn squash_after(&mut self, keep: Option<u64>) {
        let limit = keep.map_or(0, |s| s + 1);
        while self.rob.back().is_some_and(|u| u.seq >= limit) {
            let mut u = self.rob.pop_back().expect("back exists");
            match u.inst.op {
                Opcode::Load => self.ldq_len -= 1,
                Opcode::Store => {
                    self.stq.pop_back();
                }
                Opcode::Fence => self.fences_in_rob -= 1,
                _ => {}
            }
            self.unresolved.remove(&u.seq);
            let mut h = std::mem::take(&mut u.i_handles);
            h.append(&mut u.d_handles);
            self.release(&mut h, false);
            self.stats.squashed_uops += 1;
        }
        self.iq.retain(|&s| s < limit);
        self.resolve_queue.retain(|&(_, s)| s < limit);
        self.wfb_waiting.retain(|&s| s < limit);
        while let Some(mut f) = self.frontend.pop_front() {
            self.release(&mut f.handles, false);
        }
        if let Some(mut p) = self.fetch.pending.take() {
            self.release(&mut p.handles, false);
        }
        self.rename = [None; NUM_REGS];
        for u in &self.rob {
            if u.inst.op.writes_dst() {
                self.rename[u.inst.dst as usize] = Some(u.seq);
            }
        }
    }

    fn redirect(&mut self, pc: u64) {
        self.fetch.pc = pc;
        self.fetch.stopped = false;
    }

    fn resolve_stage(&mut self, t: u64) {
        let mut ready: Vec<u64> = Vec::new();
        while let Some(&(r, s)) = self.resolve_queue.first() {
            if r > t {
                break;
            }
            self.resolve_queue.pop_first();
            ready.push(s);
        }
        ready.sort_unstable();
        for s in ready {
            let Some(i) = self.find(s) else { continue };
            self.active = true;
            let u = &mut self.rob[i];
            u.resolved = true;
            let (pc, taken, actual, pred) = (u.pc, u.taken, u.actual_next, u.pred_next);
            self.unresolved.remove(&s);
            self.bpu.update(pc, taken, actual);
            if actual != pred {
                self.stats.mispredicts += 1;
                self.squash_after(Some(s));
                self.redirect(actual);
            }
        }
    }

    fn wfb_stage(&mut self, t: u64) {
        let barrier = self.unresolved.first().copied().unwrap_or(u64::MAX);
        let mut i = self.rob.partition_point(|u| u.seq < self.wfb_cursor);
        while i < self.rob.len() && self.rob[i].seq <= barrier {
            let mut u = std::mem::replace(&mut self.rob[i], placeholder());
            self.apply_i_effects(&mut u);
            if u.is_load() {
                self.wfb_waiting.push(u.seq);
            } else {
                self.apply_d_effects(&mut u);
            }
            self.wfb_cursor = u.seq + 1;
            self.rob[i] = u;
            self.active = true;
            i += 1;
        }
        let waiting = std::mem::take(&mut self.wfb_waiting);
        for s in waiting {
            let Some(i) = self.find(s) else { continue };
            if self.rob[i].issued && self.rob[i].ready_at <= t {
                let mut u = std::mem::replace(&mut self.rob[i], placeholder());
                self.apply_d_effects(&mut u);
                self.rob[i] = u;
                self.active = true;
            } else {
                self.wfb_waiting.push(s);
            }
        }
    }

    /// Occupancy limits that must hold at every cycle.
    pub fn check_bounds(&self) -> Result<(), String> {
        let p = &self.config.pipeline;
        if self.rob.len() > p.rob || self.iq.len() > p.iq || self.ldq_len > p.ldq || self.stq.len() > p.stq {
            return Err("pipeline structure over capacity".into());
        }
        if self.rob.len() + self.frontend.len() > p.rob {
            return Err("fetch throttle violated".into());
        }
        self.shadow.check_invariants()
    }

    /// Sum of live shadow references held by in-flight instructions and the
    /// fetch unit, per kind.
    pub fn live_handles(&self) -> [u64; 4] {
        let mut n = [0u64; 4];
        let rob = self.rob.iter().flat_map(|u| u.i_handles.iter().chain(u.d_handles.iter()));
        let fe = self.frontend.iter().flat_map(|f| f.handles.iter());
        let pend = self.fetch.pending.iter().flat_map(|p| p.handles.iter());
        for h in rob.chain(fe).chain(pend) {
            n[h.kind.index()] += 1;
        }
        n
    }
}

fn placeholder() -> Uop {
    Uop {
        seq: 0,
        pc: 0,
        inst: Instruction::nop(),
        pred_next: 0,
        producers: [None; 2],
        epoch: None,
        issued: false,
        ready_at: 0,
        value: 0,
        resolved: false,
        taken: false,
        actual_next: 0,
        va: 0,
        pa: None,
        i_handles: Vec::new(),
        d_handles: Vec::new(),
        i_effect: false,
        itlb_effect: false,
        d_effect: false,
        dtlb_effect: false,
        i_done: true,
        d_done: true,
    }
}

#[cfg(test)]
mod tests;
