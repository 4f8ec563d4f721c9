//! Fetch, dispatch, issue and the timing of instruction and data accesses.

use super::{Effect, FetchedInst, Machine, PendingFetch, Uop};
use crate::bpu::BranchKind;
use crate::isa::{alu, branch_taken, effective_address, Opcode, Operand, Program, INST_BYTES, WORD_BYTES};
use crate::memsys::{line_of, HitLevel, Side, PAGE_SHIFT};
use crate::safespec::{FullPolicy, Handle, MissOutcome, ShadowKind};

/// Where an access will be served from, decided at access time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Committed,
    /// Resident in the shadow table (or pending in baseline); fill cycle.
    Shadow(u64),
    /// Miss with this latency.
    Miss(u32),
}

struct LoadTiming {
    ready_at: u64,
    pa: Option<u64>,
    handles: Vec<Handle>,
    d_effect: bool,
    dtlb_effect: bool,
}

impl Machine {
    fn tlb_source(&mut self, side: Side, va: u64) -> Source {
        let vpn = va >> PAGE_SHIFT;
        let kind = if side == Side::Data { ShadowKind::DTlb } else { ShadowKind::ITlb };
        if self.mem.tlb(side).get(vpn).is_some() {
            Source::Committed
        } else if let Some(f) = self.pending_fill(kind, side, vpn, true) {
            Source::Shadow(f)
        } else {
            Source::Miss(self.mem.translate_peek(side, va).latency)
        }
    }

    fn line_source(&mut self, side: Side, line: u64) -> Source {
        let kind = if side == Side::Data { ShadowKind::D } else { ShadowKind::I };
        if self.mem.probe(side, line) == HitLevel::L1 {
            Source::Committed
        } else if let Some(f) = self.pending_fill(kind, side, line, false) {
            Source::Shadow(f)
        } else {
            let level = self.mem.probe(side, line);
            Source::Miss(self.mem.config.latency_of(side, level))
        }
    }

    /// Fill cycle of an in-flight copy: the shadow entry, or in baseline
    /// the outstanding fill.
    fn pending_fill(&self, kind: ShadowKind, side: Side, key: u64, tlb: bool) -> Option<u64> {
        if self.mode().shadowed() {
            self.shadow.shadow_lookup(kind, key)
        } else if tlb {
            self.pending_tlb.get(&(side, key)).copied()
        } else {
            self.pending_lines.get(&(side, key)).copied()
        }
    }

    /// Pre-checks room for the allocations an access needs. Under `block`
    /// a full table stalls the whole access, unless the requester is
    /// non-speculative (it would otherwise wait on younger holders forever).
    fn blocked(&mut self, needs: &[(ShadowKind, bool)], nonspec: bool) -> bool {
        if nonspec || !self.mode().shadowed() || self.config.shadow.full_policy != FullPolicy::Block {
            return false;
        }
        for &(kind, need) in needs {
            if need && !self.shadow.has_room(kind) {
                self.shadow.note_full(kind);
                return true;
            }
        }
        false
    }

    /// Acquires a reference for an access served by `src`. Returns false
    /// when the allocation was dropped (nothing will be retained). A
    /// non-speculative requester facing a full table goes without an entry
    /// and is replayed at commit as usual.
    #[allow(clippy::too_many_arguments)]
    fn acquire(
        &mut self,
        kind: ShadowKind,
        key: u64,
        src: Source,
        fill_cycle: u64,
        requester: u64,
        epoch: Option<u64>,
        handles: &mut Vec<Handle>,
        nonspec: bool,
    ) -> bool {
        if nonspec && matches!(src, Source::Miss(_)) && !self.shadow.has_room(kind) {
            return true;
        }
        match src {
            Source::Committed => true,
            Source::Shadow(_) => {
                if let Some((h, _)) = self.shadow.join(kind, key) {
                    handles.push(h);
                }
                true
            }
            Source::Miss(_) => match self.shadow.on_speculative_miss(kind, key, requester, epoch, fill_cycle) {
                MissOutcome::Allocated(h) => {
                    handles.push(h);
                    true
                }
                MissOutcome::Dropped => false,
                MissOutcome::Blocked => unreachable!("room was checked"),
            },
        }
    }

    /// Baseline: touch on hit now, fill at arrival on miss.
    fn baseline_touch_or_fill(&mut self, side: Side, key: u64, va: u64, src: Source, arrival: u64, tlb: bool) {
        match src {
            Source::Committed => {
                if tlb {
                    self.mem.tlb_mut(side).touch(key);
                } else {
                    self.mem.lookup(side, key, true);
                }
            }
            Source::Shadow(_) => {}
            Source::Miss(_) => {
                if tlb {
                    self.pending_tlb.insert((side, key), arrival);
                    self.schedule(arrival, Effect::Tlb(side, va));
                } else {
                    self.pending_lines.insert((side, key), arrival);
                    self.schedule(arrival, Effect::Line(side, key));
                }
            }
        }
    }

    fn fetch_access(&mut self, t: u64, pc: u64) -> Option<PendingFetch> {
        let vpn = pc >> PAGE_SHIFT;
        let line = line_of(pc);
        let tlb_hit = self.mem.config.tlb_hit_latency;
        let l1 = self.mem.config.l1i.hit_latency;
        let ts = self.tlb_source(Side::Inst, pc);
        let extra_t = match ts {
            Source::Committed => 0,
            Source::Shadow(f) => f.saturating_sub(t),
            Source::Miss(l) => (l - tlb_hit) as u64,
        };
        let ls = self.line_source(Side::Inst, line);
        let nonspec = self.rob.is_empty() && self.frontend.is_empty();
        if self.blocked(&[
            (ShadowKind::ITlb, matches!(ts, Source::Miss(_))),
            (ShadowKind::I, matches!(ls, Source::Miss(_))),
        ], nonspec) {
            self.active = true;
            return None;
        }
        let ready_at = match ls {
            Source::Committed => t + extra_t,
            Source::Shadow(f) => (t + extra_t).max(f),
            Source::Miss(l) => t + extra_t + (l - l1) as u64,
        };
        self.count_access(ShadowKind::ITlb, matches!(ts, Source::Shadow(_)), matches!(ts, Source::Miss(_)));
        self.count_access(ShadowKind::I, matches!(ls, Source::Shadow(_)), matches!(ls, Source::Miss(_)));
        let mut handles = Vec::new();
        let (mut itlb_effect, mut i_effect) = (true, true);
        if self.mode().shadowed() {
            let req = self.next_seq;
            itlb_effect = self.acquire(ShadowKind::ITlb, vpn, ts, t + extra_t, req, None, &mut handles, nonspec);
            i_effect = self.acquire(ShadowKind::I, line, ls, ready_at, req, None, &mut handles, nonspec);
        } else {
            self.baseline_touch_or_fill(Side::Inst, vpn, pc, ts, t + extra_t, true);
            self.baseline_touch_or_fill(Side::Inst, line, pc, ls, ready_at, false);
        }
        Some(PendingFetch { line, ready_at, handles, i_effect, itlb_effect })
    }

    fn load_access(&mut self, i: usize, t: u64, va: u64) -> Option<LoadTiming> {
        let (seq, epoch) = (self.rob[i].seq, self.rob[i].epoch);
        if !va.is_multiple_of(WORD_BYTES) {
            return Some(LoadTiming { ready_at: t + 1, pa: None, handles: Vec::new(), d_effect: false, dtlb_effect: false });
        }
        let vpn = va >> PAGE_SHIFT;
        let tlb_hit = self.mem.config.tlb_hit_latency as u64;
        let ts = self.tlb_source(Side::Data, va);
        let tlat = match ts {
            Source::Committed => tlb_hit,
            Source::Shadow(f) => tlb_hit.max(f.saturating_sub(t)),
            Source::Miss(l) => l as u64,
        };
        let pa = self.mem.page_table.translate(va).map(|tr| tr.pa);
        let ls = pa.map(|pa| self.line_source(Side::Data, line_of(pa)));
        let nonspec = i == 0;
        if self.blocked(&[
            (ShadowKind::DTlb, matches!(ts, Source::Miss(_))),
            (ShadowKind::D, matches!(ls, Some(Source::Miss(_)))),
        ], nonspec) {
            self.active = true;
            return None;
        }
        let start = t + tlat;
        let ready_at = match ls {
            None => start,
            Some(Source::Committed) => start + self.mem.config.l1d.hit_latency as u64,
            Some(Source::Shadow(f)) => (start + self.config.shadow.shadow_latency as u64).max(f),
            Some(Source::Miss(l)) => start + l as u64,
        };
        self.count_access(ShadowKind::DTlb, matches!(ts, Source::Shadow(_)), matches!(ts, Source::Miss(_)));
        if let Some(ls) = ls {
            self.count_access(ShadowKind::D, matches!(ls, Source::Shadow(_)), matches!(ls, Source::Miss(_)));
        }
        let mut handles = Vec::new();
        let (mut dtlb_effect, mut d_effect) = (true, true);
        if self.mode().shadowed() {
            dtlb_effect = self.acquire(ShadowKind::DTlb, vpn, ts, start, seq, epoch, &mut handles, nonspec);
            if let (Some(pa), Some(ls)) = (pa, ls) {
                d_effect = self.acquire(ShadowKind::D, line_of(pa), ls, ready_at, seq, epoch, &mut handles, nonspec);
            }
        } else {
            self.baseline_touch_or_fill(Side::Data, vpn, va, ts, start, true);
            if let (Some(pa), Some(ls)) = (pa, ls) {
                self.baseline_touch_or_fill(Side::Data, line_of(pa), va, ls, ready_at, false);
            }
        }
        Some(LoadTiming { ready_at, pa, handles, d_effect, dtlb_effect })
    }

    pub(super) fn fetch_stage(&mut self, t: u64) {
        if self.fetch.stopped {
            return;
        }
        let Some(_) = self.program.index_of(self.fetch.pc) else { return };
        let p = self.config.pipeline;
        let used = self.rob.len() + self.frontend.len();
        let fe_cap = p.frontend_capacity();
        if used >= p.rob || self.frontend.len() >= fe_cap {
            return;
        }
        let line = line_of(self.fetch.pc);
        if self.fetch.pending.as_ref().is_none_or(|pf| pf.line != line) {
            if let Some(mut old) = self.fetch.pending.take() {
                self.release(&mut old.handles, false);
            }
            let Some(pf) = self.fetch_access(t, self.fetch.pc) else { return };
            self.fetch.pending = Some(pf);
            self.active = true;
        }
        if self.fetch.pending.as_ref().is_some_and(|pf| pf.ready_at > t) {
            return;
        }
        let mut pf = self.fetch.pending.take().expect("pending fetch");
        self.active = true;
        let keys = pf.handles.clone();
        let limit = p.fetch_width.min(p.rob - used).min(fe_cap - self.frontend.len());
        let mut pc = self.fetch.pc;
        let mut count = 0;
        while let Some(idx) = self.program.index_of(pc) {
            let inst = self.program.instructions[idx];
            let handles = if count == 0 {
                std::mem::take(&mut pf.handles)
            } else {
                keys.iter().filter_map(|h| self.shadow.join(h.kind, h.key).map(|(h, _)| h)).collect()
            };
            let next_seq = pc + INST_BYTES;
            let (next, stop) = match inst.op {
                Opcode::Beq | Opcode::Bne | Opcode::Blt => {
                    let target = Program::pc_of(inst.target.expect("branch target"));
                    let pred = self.bpu.predict(pc, BranchKind::Conditional, target);
                    if pred.taken {
                        (target, true)
                    } else {
                        (next_seq, false)
                    }
                }
                Opcode::Jmp => (Program::pc_of(inst.target.expect("jump target")), true),
                Opcode::Jmpi => (self.bpu.predict(pc, BranchKind::Indirect, 0).target, true),
                Opcode::Halt => {
                    self.fetch.stopped = true;
                    (next_seq, true)
                }
                _ => (next_seq, false),
            };
            self.frontend.push_back(FetchedInst {
                idx,
                pc,
                pred_next: next,
                deliver_at: t + p.fetch_depth,
                handles,
                i_effect: pf.i_effect,
                itlb_effect: pf.itlb_effect,
            });
            count += 1;
            pc = next;
            if stop || count == limit || line_of(pc) != line {
                break;
            }
        }
        self.fetch.pc = pc;
        self.high_water.frontend = self.high_water.frontend.max(self.frontend.len());
    }

    pub(super) fn dispatch_stage(&mut self, t: u64) {
        let p = self.config.pipeline;
        for _ in 0..p.dispatch_width {
            let Some(f) = self.frontend.front() else { break };
            if f.deliver_at > t || self.fences_in_rob > 0 {
                break;
            }
            let inst = self.program.instructions[f.idx];
            if inst.op == Opcode::Fence && !self.rob.is_empty() {
                break;
            }
            if self.rob.len() >= p.rob
                || self.iq.len() >= p.iq
                || (inst.op == Opcode::Load && self.ldq_len >= p.ldq)
                || (inst.op == Opcode::Store && self.stq.len() >= p.stq)
            {
                break;
            }
            let f = self.frontend.pop_front().expect("front exists");
            let seq = self.next_seq;
            self.next_seq += 1;
            let (r1, r2) = inst.source_regs();
            let producers = [r1.and_then(|r| self.rename[r as usize]), r2.and_then(|r| self.rename[r as usize])];
            let epoch = self.unresolved.last().copied();
            if inst.op.writes_dst() {
                self.rename[inst.dst as usize] = Some(seq);
            }
            let u = Uop {
                seq,
                pc: f.pc,
                inst,
                pred_next: f.pred_next,
                producers,
                epoch,
                issued: false,
                ready_at: 0,
                value: 0,
                resolved: false,
                taken: false,
                actual_next: f.pc + INST_BYTES,
                va: 0,
                pa: None,
                i_handles: f.handles,
                d_handles: Vec::new(),
                i_effect: f.i_effect,
                itlb_effect: f.itlb_effect,
                d_effect: true,
                dtlb_effect: true,
                i_done: false,
                d_done: false,
            };
            if u.guards_speculation() {
                self.unresolved.insert(seq);
            }
            match inst.op {
                Opcode::Load => self.ldq_len += 1,
                Opcode::Store => self.stq.push_back(seq),
                Opcode::Fence => self.fences_in_rob += 1,
                _ => {}
            }
            self.rob.push_back(u);
            self.iq.push(seq);
            self.active = true;
        }
        let hw = &mut self.high_water;
        hw.rob = hw.rob.max(self.rob.len());
        hw.iq = hw.iq.max(self.iq.len());
        hw.ldq = hw.ldq.max(self.ldq_len);
        hw.stq = hw.stq.max(self.stq.len());
    }

    /// Value of source operand `slot`, if its producer's result is visible at `t`.
    fn operand(&self, u: &Uop, slot: usize, reg: u8, t: u64) -> Option<u64> {
        match u.producers[slot].and_then(|p| self.find(p)) {
            Some(j) => {
                let pu = &self.rob[j];
                (pu.issued && pu.ready_at <= t).then_some(pu.value)
            }
            None => Some(self.arch.regs[reg as usize]),
        }
    }

    /// Whether an older store blocks a load of `va`: unknown address or overlap.
    fn store_conflict(&self, seq: u64, va: u64) -> bool {
        for &s in &self.stq {
            if s > seq {
                break;
            }
            let Some(j) = self.find(s) else { continue };
            let st = &self.rob[j];
            if !st.issued || (st.va < va.wrapping_add(WORD_BYTES) && va < st.va.wrapping_add(WORD_BYTES)) {
                return true;
            }
        }
        false
    }

    fn try_issue(&mut self, i: usize, t: u64) -> bool {
        let u = &self.rob[i];
        let (r1, r2) = u.inst.source_regs();
        let a = match r1 {
            Some(r) => match self.operand(u, 0, r, t) {
                Some(v) => v,
                None => return false,
            },
            None => 0,
        };
        let b = match (u.inst.src2, r2) {
            (Operand::Imm(v), _) => v as u64,
            (_, Some(r)) => match self.operand(u, 1, r, t) {
                Some(v) => v,
                None => return false,
            },
            _ => 0,
        };
        let inst = u.inst;
        let (seq, pc) = (u.seq, u.pc);
        let p = self.config.pipeline;
        let mut ready_at = t;
        let mut value = 0;
        let mut control = None;
        let mut mem = None;
        match inst.op {
            Opcode::Movi => {
                value = b;
                ready_at = t + p.alu_latency;
            }
            op if op.is_alu() => {
                value = alu(op, a, b);
                ready_at = t + if op == Opcode::Mul { p.mul_latency } else { p.alu_latency };
            }
            Opcode::Beq | Opcode::Bne | Opcode::Blt => {
                let taken = branch_taken(inst.op, a, b);
                let next = if taken { Program::pc_of(inst.target.expect("branch target")) } else { pc + INST_BYTES };
                control = Some((taken, next));
                ready_at = t + p.alu_latency;
            }
            Opcode::Jmp => {
                control = Some((true, Program::pc_of(inst.target.expect("jump target"))));
                ready_at = t + p.alu_latency;
            }
            Opcode::Jmpi => {
                control = Some((true, a));
                ready_at = t + p.alu_latency;
            }
            Opcode::Load => {
                let va = effective_address(&inst, a);
                if self.store_conflict(seq, va) {
                    return false;
                }
                let Some(lt) = self.load_access(i, t, va) else { return false };
                ready_at = lt.ready_at;
                value = lt.pa.map_or(0, |pa| self.arch.mem.read_u64(pa));
                let u = &mut self.rob[i];
                u.va = va;
                u.pa = lt.pa;
                u.d_handles = lt.handles;
                u.d_effect = lt.d_effect;
                u.dtlb_effect = lt.dtlb_effect;
            }
            Opcode::Store | Opcode::Clflush => {
                let va = effective_address(&inst, a);
                value = b;
                mem = Some((va, self.mem.page_table.translate(va).map(|tr| tr.pa)));
                ready_at = t + p.alu_latency;
            }
            Opcode::Rdtsc => {
                if i != 0 {
                    return false;
                }
                value = t + 1;
            }
            Opcode::Fence | Opcode::Nop | Opcode::Halt => {}
            _ => unreachable!("all opcodes covered"),
        }
        let u = &mut self.rob[i];
        u.issued = true;
        u.ready_at = ready_at;
        u.value = value;
        if let Some((va, pa)) = mem {
            u.va = va;
            u.pa = pa;
        }
        if let Some((taken, next)) = control {
            u.taken = taken;
            u.actual_next = next;
            self.resolve_queue.insert((ready_at, seq));
        }
        true
    }

    pub(super) fn issue_stage(&mut self, t: u64) {
        let width = self.config.pipeline.issue_width;
        let mut issued = 0;
        let mut k = 0;
        while k < self.iq.len() && issued < width {
            let seq = self.iq[k];
            let i = self.find(seq).expect("issue queue entry is in the ROB");
            if self.try_issue(i, t) {
                self.iq.remove(k);
                issued += 1;
                self.active = true;
            } else {
                k += 1;
            }
        }
    }
}
