//! Shadow speculative state: four reference-counted tables (D-lines,
//! I-lines, dTLB, iTLB) that hold what speculative instructions brought in,
//! plus the response filter that discards late fills for freed entries.
//!
//! The tables only track residency and timing. When an owner is released
//! as committed, the core applies its committed effects to the memory
//! system; when released as squashed, nothing leaves the table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "wfb")]
    Wfb,
    #[serde(rename = "wfc")]
    Wfc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Wfb, Mode::Wfc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Wfb => "wfb",
            Mode::Wfc => "wfc",
        }
    }

    pub fn shadowed(self) -> bool {
        self != Mode::Baseline
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected baseline, wfb or wfc)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShadowKind {
    D,
    I,
    #[serde(rename = "dTLB")]
    DTlb,
    #[serde(rename = "iTLB")]
    ITlb,
}

impl ShadowKind {
    pub const ALL: [ShadowKind; 4] = [ShadowKind::D, ShadowKind::I, ShadowKind::DTlb, ShadowKind::ITlb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShadowKind::D => "D",
            ShadowKind::I => "I",
            ShadowKind::DTlb => "dTLB",
            ShadowKind::ITlb => "iTLB",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FullPolicy {
    #[serde(rename = "block")]
    Block,
    #[serde(rename = "drop")]
    Drop,
}

impl FullPolicy {
    pub fn name(self) -> &'static str {
        match self {
            FullPolicy::Block => "block",
            FullPolicy::Drop => "drop",
        }
    }
}

impl FromStr for FullPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "block" => Ok(FullPolicy::Block),
            "drop" => Ok(FullPolicy::Drop),
            _ => Err(format!("unknown full_policy `{s}` (expected block or drop)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "worst-case")]
    WorstCase,
    #[serde(rename = "sized")]
    Sized,
    #[serde(rename = "custom")]
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::WorstCase => "worst-case",
            Preset::Sized => "sized",
            Preset::Custom => "custom",
        }
    }

    /// Capacities in [`ShadowKind::ALL`] order. `Custom` has none.
    pub fn capacities(self) -> Option<[usize; 4]> {
        match self {
            Preset::WorstCase => Some([72, 224, 72, 224]),
            Preset::Sized => Some([32, 25, 25, 10]),
            Preset::Custom => None,
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "worst-case" => Ok(Preset::WorstCase),
            "sized" => Ok(Preset::Sized),
            "custom" => Ok(Preset::Custom),
            _ => Err(format!("unknown preset `{s}` (expected worst-case, sized or custom)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub mode: Mode,
    pub preset: Preset,
    /// Indexed by [`ShadowKind::index`].
    pub capacities: [usize; 4],
    pub full_policy: FullPolicy,
    pub shadow_latency: u32,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig::with_preset(Mode::Wfc, Preset::WorstCase, FullPolicy::Block)
    }
}

impl ShadowConfig {
    pub fn with_preset(mode: Mode, preset: Preset, full_policy: FullPolicy) -> Self {
        ShadowConfig {
            mode,
            preset,
            capacities: preset.capacities().unwrap_or([72, 224, 72, 224]),
            full_policy,
            shadow_latency: 4,
        }
    }

    pub fn capacity(&self, kind: ShadowKind) -> usize {
        self.capacities[kind.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShadowEntry {
    pub key: u64,
    pub refcount: u32,
    pub filled: bool,
    pub fill_cycle: u64,
    /// Request that will fill this entry.
    pub request: u64,
}

#[derive(Clone, Debug)]
pub struct ShadowTable {
    pub kind: ShadowKind,
    pub capacity: usize,
    entries: BTreeMap<u64, ShadowEntry>,
    pub high_water: usize,
}

impl ShadowTable {
    pub fn new(kind: ShadowKind, capacity: usize) -> Self {
        ShadowTable { kind, capacity, entries: BTreeMap::new(), high_water: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn get(&self, key: u64) -> Option<&ShadowEntry> {
        self.entries.get(&key)
    }

    pub fn refcount_total(&self) -> u64 {
        self.entries.values().map(|e| e.refcount as u64).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ShadowEntry> {
        self.entries.values()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Handle {
    pub kind: ShadowKind,
    pub key: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissOutcome {
    Allocated(Handle),
    Blocked,
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterRecord {
    pub kind: ShadowKind,
    pub key: u64,
    pub requester_seq: u64,
    pub branch_epoch: Option<u64>,
    pub squashed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemResponse {
    pub request_id: u64,
    pub key: u64,
    pub arrival_cycle: u64,
    pub requester_seq: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounters {
    /// Refcount-weighted acquisitions (new entries plus joins).
    pub allocations: u64,
    pub promotions: u64,
    pub squash_frees: u64,
    pub full_events: u64,
    pub drops: u64,
    pub discarded_responses: u64,
}

#[derive(Clone, Debug)]
pub struct SafeSpec {
    pub config: ShadowConfig,
    tables: [ShadowTable; 4],
    filter: BTreeMap<u64, FilterRecord>,
    arrivals: BTreeMap<u64, Vec<u64>>,
    next_request: u64,
    pub counters: [KindCounters; 4],
}

impl SafeSpec {
    pub fn new(config: ShadowConfig) -> Self {
        let tables = ShadowKind::ALL.map(|k| ShadowTable::new(k, config.capacity(k)));
        SafeSpec {
            config,
            tables,
            filter: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            next_request: 0,
            counters: Default::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn table(&self, kind: ShadowKind) -> &ShadowTable {
        &self.tables[kind.index()]
    }

    /// Fill cycle of a resident entry, without touching anything.
    pub fn shadow_lookup(&self, kind: ShadowKind, key: u64) -> Option<u64> {
        self.tables[kind.index()].get(key).map(|e| e.fill_cycle)
    }

    /// Takes another reference on a resident entry and returns its fill cycle.
    pub fn join(&mut self, kind: ShadowKind, key: u64) -> Option<(Handle, u64)> {
        let e = self.tables[kind.index()].entries.get_mut(&key)?;
        e.refcount += 1;
        self.counters[kind.index()].allocations += 1;
        Some((Handle { kind, key }, e.fill_cycle))
    }

    /// Whether an allocation of `kind` would succeed right now.
    pub fn has_room(&self, kind: ShadowKind) -> bool {
        !self.tables[kind.index()].is_full()
    }

    /// Records a full-table event for `kind` (the caller stalled or dropped).
    pub fn note_full(&mut self, kind: ShadowKind) {
        let c = &mut self.counters[kind.index()];
        c.full_events += 1;
        if self.config.full_policy == FullPolicy::Drop {
            c.drops += 1;
        }
    }

    /// Allocates a fresh entry for a speculative miss whose response arrives
    /// at `fill_cycle`. The key must not be resident.
    pub fn on_speculative_miss(
        &mut self,
        kind: ShadowKind,
        key: u64,
        requester_seq: u64,
        branch_epoch: Option<u64>,
        fill_cycle: u64,
    ) -> MissOutcome {
        debug_assert!(self.tables[kind.index()].get(key).is_none());
        if self.tables[kind.index()].is_full() {
            self.note_full(kind);
            return match self.config.full_policy {
                FullPolicy::Block => MissOutcome::Blocked,
                FullPolicy::Drop => MissOutcome::Dropped,
            };
        }
        let request = self.next_request;
        self.next_request += 1;
        self.filter.insert(request, FilterRecord { kind, key, requester_seq, branch_epoch, squashed: false });
        self.arrivals.entry(fill_cycle).or_default().push(request);
        let t = &mut self.tables[kind.index()];
        t.entries.insert(key, ShadowEntry { key, refcount: 1, filled: false, fill_cycle, request });
        t.high_water = t.high_water.max(t.entries.len());
        self.counters[kind.index()].allocations += 1;
        MissOutcome::Allocated(Handle { kind, key })
    }

    fn release(&mut self, h: Handle, promoted: bool) {
        let c = &mut self.counters[h.kind.index()];
        if promoted {
            c.promotions += 1;
        } else {
            c.squash_frees += 1;
        }
        let t = &mut self.tables[h.kind.index()];
        let e = t.entries.get_mut(&h.key).expect("released handle has an entry");
        e.refcount -= 1;
        if e.refcount == 0 {
            let e = t.entries.remove(&h.key).expect("entry present");
            if !e.filled {
                if let Some(r) = self.filter.get_mut(&e.request) {
                    r.squashed = true;
                }
            }
        }
    }

    /// Owner committed (or became safe under WFB): its references count as
    /// promotions.
    pub fn on_commit(&mut self, handles: &[Handle]) {
        for &h in handles {
            self.release(h, true);
        }
    }

    pub fn on_squash(&mut self, handles: &[Handle]) {
        for &h in handles {
            self.release(h, false);
        }
    }

    /// Delivers every response due by `now`. Responses whose record was
    /// squashed are discarded.
    pub fn process_arrivals(&mut self, now: u64) -> Vec<MemResponse> {
        let mut out = Vec::new();
        while let Some((&cycle, _)) = self.arrivals.first_key_value() {
            if cycle > now {
                break;
            }
            let reqs = self.arrivals.remove(&cycle).unwrap_or_default();
            for id in reqs {
                let rec = self.filter.remove(&id).expect("response matches an outstanding record");
                if rec.squashed {
                    self.counters[rec.kind.index()].discarded_responses += 1;
                    continue;
                }
                if let Some(e) = self.tables[rec.kind.index()].entries.get_mut(&rec.key) {
                    if e.request == id {
                        e.filled = true;
                    }
                }
                out.push(MemResponse { request_id: id, key: rec.key, arrival_cycle: cycle, requester_seq: rec.requester_seq });
            }
        }
        out
    }

    pub fn next_arrival(&self) -> Option<u64> {
        self.arrivals.keys().next().copied()
    }

    pub fn outstanding(&self) -> usize {
        self.filter.len()
    }

    pub fn occupancy_sample(&self) -> [usize; 4] {
        ShadowKind::ALL.map(|k| self.tables[k.index()].len())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for t in &self.tables {
            if t.len() > t.capacity {
                return Err(format!("shadow {} over capacity", t.kind.name()));
            }
            if t.entries.values().any(|e| e.refcount == 0) {
                return Err(format!("shadow {} entry with zero refcount", t.kind.name()));
            }
        }
        Ok(())
    }
}
