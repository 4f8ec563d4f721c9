//! Committed memory system: inclusive L1I/L1D/L2/L3, iTLB/dTLB, the page
//! table and fixed latencies.
//!
//! Nothing here knows about speculation. Callers decide when a structure may
//! change: `lookup` with `committed = false` and `translate` with
//! `committed = false` are read-only.

mod cache;
mod page_table;
mod tlb;

pub use cache::{CacheGeometry, CacheLevel, CacheName, Way};
pub use page_table::{walk_lines, PageEntry, PageTable, Translation, PAGE_BYTES, PAGE_SHIFT, WALK_PD_BASE, WALK_PT_BASE};
pub use tlb::{Tlb, TlbEntry};

use serde::{Deserialize, Serialize};

use crate::isa::Perm;

pub const LINE_BYTES: u64 = 64;

pub fn line_of(addr: u64) -> u64 {
    addr & !(LINE_BYTES - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Inst,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    L1,
    L2,
    L3,
    Mem,
    Shadow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessResult {
    pub hit_level: HitLevel,
    pub latency: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub l1i: CacheGeometry,
    pub l1d: CacheGeometry,
    pub l2: CacheGeometry,
    pub l3: CacheGeometry,
    pub mem_latency: u32,
    pub itlb_entries: usize,
    pub dtlb_entries: usize,
    pub tlb_hit_latency: u32,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            l1i: CacheGeometry::new(32 * 1024, 8, 4),
            l1d: CacheGeometry::new(32 * 1024, 8, 4),
            l2: CacheGeometry::new(256 * 1024, 4, 12),
            l3: CacheGeometry::new(2 * 1024 * 1024, 16, 44),
            mem_latency: 191,
            itlb_entries: 64,
            dtlb_entries: 64,
            tlb_hit_latency: 1,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), String> {
        for g in [self.l1i, self.l1d, self.l2, self.l3] {
            g.validate()?;
            if g.line_bytes != LINE_BYTES {
                return Err("line size must be 64 bytes".into());
            }
        }
        if self.itlb_entries == 0 || self.dtlb_entries == 0 {
            return Err("TLB capacity must be non-zero".into());
        }
        Ok(())
    }

    pub fn latency_of(&self, side: Side, level: HitLevel) -> u32 {
        match level {
            HitLevel::L1 | HitLevel::Shadow => match side {
                Side::Inst => self.l1i.hit_latency,
                Side::Data => self.l1d.hit_latency,
            },
            HitLevel::L2 => self.l2.hit_latency,
            HitLevel::L3 => self.l3.hit_latency,
            HitLevel::Mem => self.mem_latency,
        }
    }
}

/// Outcome of a translation. `translation` is `None` for an unmapped page;
/// the walk still happened and its latency is reported.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslateResult {
    pub vpn: u64,
    pub translation: Option<Translation>,
    pub latency: u32,
    pub tlb_hit: bool,
    pub walk_lines: Vec<u64>,
}

impl TranslateResult {
    pub fn perm(&self) -> Option<Perm> {
        self.translation.map(|t| t.perm)
    }
}

/// Comparable committed state: tags + LRU of every cache and TLB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommittedSnapshot {
    pub caches: [Vec<(usize, u64, usize)>; 4],
    pub itlb: Vec<(u64, u64, Perm, usize)>,
    pub dtlb: Vec<(u64, u64, Perm, usize)>,
}

#[derive(Clone, Debug)]
pub struct MemorySystem {
    pub config: MemoryConfig,
    pub l1i: CacheLevel,
    pub l1d: CacheLevel,
    pub l2: CacheLevel,
    pub l3: CacheLevel,
    pub itlb: Tlb,
    pub dtlb: Tlb,
    pub page_table: PageTable,
}

impl MemorySystem {
    pub fn new(config: MemoryConfig, page_table: PageTable) -> Self {
        MemorySystem {
            l1i: CacheLevel::new(CacheName::L1I, config.l1i),
            l1d: CacheLevel::new(CacheName::L1D, config.l1d),
            l2: CacheLevel::new(CacheName::L2, config.l2),
            l3: CacheLevel::new(CacheName::L3, config.l3),
            itlb: Tlb::new(config.itlb_entries),
            dtlb: Tlb::new(config.dtlb_entries),
            config,
            page_table,
        }
    }

    fn l1(&self, side: Side) -> &CacheLevel {
        match side {
            Side::Inst => &self.l1i,
            Side::Data => &self.l1d,
        }
    }

    fn l1_mut(&mut self, side: Side) -> &mut CacheLevel {
        match side {
            Side::Inst => &mut self.l1i,
            Side::Data => &mut self.l1d,
        }
    }

    pub fn tlb(&self, side: Side) -> &Tlb {
        match side {
            Side::Inst => &self.itlb,
            Side::Data => &self.dtlb,
        }
    }

    pub fn tlb_mut(&mut self, side: Side) -> &mut Tlb {
        match side {
            Side::Inst => &mut self.itlb,
            Side::Data => &mut self.dtlb,
        }
    }

    /// Level that would serve `line` right now.
    pub fn probe(&self, side: Side, line: u64) -> HitLevel {
        if self.l1(side).contains(line) {
            HitLevel::L1
        } else if self.l2.contains(line) {
            HitLevel::L2
        } else if self.l3.contains(line) {
            HitLevel::L3
        } else {
            HitLevel::Mem
        }
    }

    /// Probes L1, L2, L3, memory. A committed access touches LRU at the hit
    /// level only. Never fills.
    pub fn lookup(&mut self, side: Side, line: u64, committed: bool) -> AccessResult {
        debug_assert_eq!(line % LINE_BYTES, 0);
        let hit_level = self.probe(side, line);
        if committed {
            match hit_level {
                HitLevel::L1 => {
                    self.l1_mut(side).touch(line);
                }
                HitLevel::L2 => {
                    self.l2.touch(line);
                }
                HitLevel::L3 => {
                    self.l3.touch(line);
                }
                _ => {}
            }
        }
        AccessResult { hit_level, latency: self.config.latency_of(side, hit_level) }
    }

    /// Installs `line` at L3, L2 and the side's L1. Outer evictions
    /// back-invalidate inner copies. Returns every evicted (level, line).
    pub fn fill_committed(&mut self, side: Side, line: u64) -> Vec<(CacheName, u64)> {
        let mut ev = Vec::new();
        if let Some(v) = self.l3.insert(line) {
            ev.push((CacheName::L3, v));
            for c in [CacheName::L2, CacheName::L1I, CacheName::L1D] {
                if self.level_mut(c).invalidate(v) {
                    ev.push((c, v));
                }
            }
        }
        if let Some(v) = self.l2.insert(line) {
            ev.push((CacheName::L2, v));
            for c in [CacheName::L1I, CacheName::L1D] {
                if self.level_mut(c).invalidate(v) {
                    ev.push((c, v));
                }
            }
        }
        let l1 = self.l1_mut(side);
        let name = l1.name;
        if let Some(v) = l1.insert(line) {
            ev.push((name, v));
        }
        ev
    }

    fn level_mut(&mut self, name: CacheName) -> &mut CacheLevel {
        match name {
            CacheName::L1I => &mut self.l1i,
            CacheName::L1D => &mut self.l1d,
            CacheName::L2 => &mut self.l2,
            CacheName::L3 => &mut self.l3,
        }
    }

    pub fn level(&self, name: CacheName) -> &CacheLevel {
        match name {
            CacheName::L1I => &self.l1i,
            CacheName::L1D => &self.l1d,
            CacheName::L2 => &self.l2,
            CacheName::L3 => &self.l3,
        }
    }

    pub fn clflush(&mut self, line: u64) {
        for c in [CacheName::L1I, CacheName::L1D, CacheName::L2, CacheName::L3] {
            self.level_mut(c).invalidate(line);
        }
    }

    /// The committed effect of one architectural line access: an L1 hit
    /// touches L1, anything else fills every level.
    pub fn commit_access(&mut self, side: Side, line: u64) {
        if self.l1(side).contains(line) {
            self.l1_mut(side).touch(line);
        } else {
            self.fill_committed(side, line);
        }
    }

    /// Translates `va`. On a TLB miss the two walk lines are read through
    /// `data_path`, which returns each read's latency. A committed TLB hit
    /// touches LRU; nothing is ever inserted here.
    pub fn translate(
        &mut self,
        side: Side,
        va: u64,
        committed: bool,
        data_path: &mut dyn FnMut(&mut MemorySystem, u64) -> u32,
    ) -> TranslateResult {
        let vpn = va >> PAGE_SHIFT;
        let hit = self.tlb(side).get(vpn).copied();
        if let Some(e) = hit {
            if committed {
                self.tlb_mut(side).touch(vpn);
            }
            return TranslateResult {
                vpn,
                translation: Some(Translation {
                    vpn,
                    ppn: e.ppn,
                    pa: (e.ppn << PAGE_SHIFT) | (va & (PAGE_BYTES - 1)),
                    perm: e.perm,
                }),
                latency: self.config.tlb_hit_latency,
                tlb_hit: true,
                walk_lines: Vec::new(),
            };
        }
        let lines = walk_lines(vpn);
        let mut latency = self.config.tlb_hit_latency;
        for &l in &lines {
            latency += data_path(self, l);
        }
        TranslateResult {
            vpn,
            translation: self.page_table.translate(va),
            latency,
            tlb_hit: false,
            walk_lines: lines.to_vec(),
        }
    }

    /// Read-only translation whose walk reads probe the committed hierarchy.
    pub fn translate_peek(&mut self, side: Side, va: u64) -> TranslateResult {
        self.translate(side, va, false, &mut |m, l| m.lookup(Side::Data, l, false).latency)
    }

    /// The committed effect of one architectural translation: a hit touches
    /// the TLB; a miss commits both walk lines on the data side and inserts
    /// the translation. Unmapped pages insert nothing.
    pub fn commit_tlb_access(&mut self, side: Side, va: u64) {
        let vpn = va >> PAGE_SHIFT;
        if self.tlb_mut(side).touch(vpn) {
            return;
        }
        for l in walk_lines(vpn) {
            self.commit_access(Side::Data, l);
        }
        if let Some(t) = self.page_table.translate(va) {
            self.tlb_mut(side).insert(vpn, t.ppn, t.perm);
        }
    }

    pub fn snapshot(&self) -> CommittedSnapshot {
        CommittedSnapshot {
            caches: [self.l1i.snapshot(), self.l1d.snapshot(), self.l2.snapshot(), self.l3.snapshot()],
            itlb: self.itlb.snapshot(),
            dtlb: self.dtlb.snapshot(),
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for c in [&self.l1i, &self.l1d, &self.l2, &self.l3] {
            c.check_invariants()?;
        }
        self.itlb.check_invariants()?;
        self.dtlb.check_invariants()?;
        for l in self.l1i.valid_lines().chain(self.l1d.valid_lines()) {
            if !self.l2.contains(l) {
                return Err(format!("inclusion: L1 line {l:#x} missing from L2"));
            }
        }
        for l in self.l2.valid_lines() {
            if !self.l3.contains(l) {
                return Err(format!("inclusion: L2 line {l:#x} missing from L3"));
            }
        }
        Ok(())
    }
}
