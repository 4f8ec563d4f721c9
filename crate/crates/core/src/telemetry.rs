//! Run statistics, derived fractions and CSV/JSON export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::safespec::{KindCounters, ShadowKind};

pub const STATS_SCHEMA: &str = "safespec-stats/1";

/// Read-side structure served by each shadow table.
pub fn structure_of(kind: ShadowKind) -> &'static str {
    match kind {
        ShadowKind::D => "L1D",
        ShadowKind::I => "L1I",
        ShadowKind::DTlb => "dTLB",
        ShadowKind::ITlb => "iTLB",
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounters {
    pub accesses: u64,
    /// Served by neither the committed L1/TLB nor the shadow table.
    pub misses: u64,
    pub shadow_hits: u64,
}

impl AccessCounters {
    pub fn committed_hits(&self) -> u64 {
        self.accesses - self.misses - self.shadow_hits
    }

    fn add(&mut self, o: &AccessCounters) {
        self.accesses += o.accesses;
        self.misses += o.misses;
        self.shadow_hits += o.shadow_hits;
    }
}

/// Occupancy histogram: `counts[v]` is the number of samples equal to `v`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn record(&mut self, value: usize, times: u64) {
        if self.counts.len() <= value {
            self.counts.resize(value + 1, 0);
        }
        self.counts[value] += times;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max(&self) -> Option<usize> {
        self.counts.iter().rposition(|&c| c > 0)
    }

    fn merge(&mut self, o: &Histogram) {
        for (v, &c) in o.counts.iter().enumerate() {
            if c > 0 {
                self.record(v, c);
            }
        }
    }
}

/// Smallest value `v` such that the fraction of samples `<= v` is at least `p`.
pub fn percentile(h: &Histogram, p: f64) -> Result<usize, String> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(format!("percentile {p} outside (0, 1]"));
    }
    let n = h.total();
    if n == 0 {
        return Err("empty histogram".into());
    }
    let mut cum = 0u64;
    for (v, &c) in h.counts.iter().enumerate() {
        cum += c;
        if c > 0 && cum as f64 / n as f64 >= p {
            return Ok(v);
        }
    }
    Ok(h.max().expect("non-empty"))
}

/// Geometric mean of positive values; `None` for an empty or invalid set.
pub fn geomean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSnapshot {
    pub schema: String,
    pub mode: String,
    pub cycles: u64,
    pub committed_uops: u64,
    pub ipc: f64,
    pub faults: u64,
    pub squashed_uops: u64,
    pub mispredicts: u64,
    pub structures: BTreeMap<String, AccessCounters>,
    pub shadow: BTreeMap<String, KindCounters>,
    pub occupancy: BTreeMap<String, Histogram>,
    /// Full-table events keyed by the policy in force.
    pub full_events: BTreeMap<String, u64>,
}

impl StatsSnapshot {
    pub fn new(mode: &str) -> Self {
        let mut s = StatsSnapshot {
            schema: STATS_SCHEMA.to_string(),
            mode: mode.to_string(),
            cycles: 0,
            committed_uops: 0,
            ipc: 0.0,
            faults: 0,
            squashed_uops: 0,
            mispredicts: 0,
            structures: BTreeMap::new(),
            shadow: BTreeMap::new(),
            occupancy: BTreeMap::new(),
            full_events: BTreeMap::new(),
        };
        for k in ShadowKind::ALL {
            s.structures.insert(structure_of(k).to_string(), AccessCounters::default());
            s.shadow.insert(k.name().to_string(), KindCounters::default());
            s.occupancy.insert(k.name().to_string(), Histogram::default());
        }
        s.full_events.insert("block".into(), 0);
        s.full_events.insert("drop".into(), 0);
        s
    }

    pub fn recompute_ipc(&mut self) {
        self.ipc = if self.cycles == 0 { 0.0 } else { self.committed_uops as f64 / self.cycles as f64 };
    }

    pub fn access(&self, kind: ShadowKind) -> &AccessCounters {
        &self.structures[structure_of(kind)]
    }

    pub fn shadow_counters(&self, kind: ShadowKind) -> &KindCounters {
        &self.shadow[kind.name()]
    }

    pub fn histogram(&self, kind: ShadowKind) -> &Histogram {
        &self.occupancy[kind.name()]
    }

    pub fn shadow_hit_fraction(&self, kind: ShadowKind) -> Option<f64> {
        let a = self.access(kind);
        let denom = a.shadow_hits + a.committed_hits();
        match (a.accesses, denom) {
            (0, _) => None,
            (_, 0) => Some(0.0),
            _ => Some(a.shadow_hits as f64 / denom as f64),
        }
    }

    pub fn commit_rate(&self, kind: ShadowKind) -> Option<f64> {
        let c = self.shadow_counters(kind);
        let n = c.promotions + c.squash_frees;
        (n > 0).then(|| c.promotions as f64 / n as f64)
    }

    pub fn total_full_events(&self) -> u64 {
        self.full_events.values().sum()
    }

    /// Whether promotions + squash frees account for every allocation.
    pub fn allocations_balanced(&self) -> bool {
        self.shadow.values().all(|c| c.promotions + c.squash_frees == c.allocations)
    }

    /// Associative, order-independent aggregation.
    pub fn merge(&self, o: &StatsSnapshot) -> StatsSnapshot {
        let mut m = self.clone();
        if m.mode != o.mode {
            m.mode = "mixed".into();
        }
        m.cycles += o.cycles;
        m.committed_uops += o.committed_uops;
        m.faults += o.faults;
        m.squashed_uops += o.squashed_uops;
        m.mispredicts += o.mispredicts;
        for (k, v) in &o.structures {
            m.structures.entry(k.clone()).or_default().add(v);
        }
        for (k, v) in &o.shadow {
            let e = m.shadow.entry(k.clone()).or_default();
            e.allocations += v.allocations;
            e.promotions += v.promotions;
            e.squash_frees += v.squash_frees;
            e.full_events += v.full_events;
            e.drops += v.drops;
            e.discarded_responses += v.discarded_responses;
        }
        for (k, v) in &o.occupancy {
            m.occupancy.entry(k.clone()).or_default().merge(v);
        }
        for (k, v) in &o.full_events {
            *m.full_events.entry(k.clone()).or_default() += v;
        }
        m.recompute_ipc();
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<StatsSnapshot, String> {
        let s: StatsSnapshot = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if s.schema != STATS_SCHEMA {
            return Err(format!("unsupported stats schema `{}`", s.schema));
        }
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,structure,value\n");
        let mut row = |m: &str, s: &str, v: String| {
            let _ = writeln!(out, "{m},{s},{v}");
        };
        row("cycles", "core", self.cycles.to_string());
        row("committed_uops", "core", self.committed_uops.to_string());
        row("ipc", "core", format!("{:.6}", self.ipc));
        row("faults", "core", self.faults.to_string());
        row("squashed_uops", "core", self.squashed_uops.to_string());
        row("mispredicts", "core", self.mispredicts.to_string());
        for (name, a) in &self.structures {
            row("accesses", name, a.accesses.to_string());
            row("misses", name, a.misses.to_string());
            row("shadow_hits", name, a.shadow_hits.to_string());
        }
        for k in ShadowKind::ALL {
            let c = self.shadow_counters(k);
            let n = k.name();
            row("allocations", n, c.allocations.to_string());
            row("promotions", n, c.promotions.to_string());
            row("squash_frees", n, c.squash_frees.to_string());
            row("full_events", n, c.full_events.to_string());
            row("drops", n, c.drops.to_string());
            row("discarded_responses", n, c.discarded_responses.to_string());
            let h = self.histogram(k);
            row("occupancy_max", n, h.max().unwrap_or(0).to_string());
            let p = percentile(h, 0.9999).map(|v| v.to_string()).unwrap_or_default();
            row("occupancy_p9999", n, p);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(samples: &[usize]) -> Histogram {
        let mut h = Histogram::default();
        for &s in samples {
            h.record(s, 1);
        }
        h
    }

    #[test]
    fn geomean_examples() {
        assert!((geomean(&[2.0, 8.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(geomean(&[]), None);
        assert_eq!(geomean(&[1.0, 0.0]), None);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&hist(&[1, 1, 2, 9]), 0.5), Ok(1));
        assert_eq!(percentile(&hist(&[1, 1, 2, 9]), 1.0), Ok(9));
        assert_eq!(percentile(&hist(&[5, 5, 5]), 0.37), Ok(5));
        assert!(percentile(&Histogram::default(), 0.5).is_err());
        assert!(percentile(&hist(&[1]), 0.0).is_err());
    }

    #[test]
    fn csv_and_json_contract() {
        let mut s = StatsSnapshot::new("wfc");
        s.cycles = 3;
        s.committed_uops = 1;
        s.recompute_ipc();
        let csv = s.to_csv();
        assert!(csv.starts_with("metric,structure,value\n"));
        assert!(csv.contains("ipc,core,0.333333\n"));
        let back = StatsSnapshot::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn merge_sums_and_recomputes() {
        let mut a = StatsSnapshot::new("wfc");
        a.cycles = 10;
        a.committed_uops = 5;
        a.occupancy.get_mut("D").unwrap().record(3, 10);
        let mut b = StatsSnapshot::new("wfc");
        b.cycles = 30;
        b.committed_uops = 35;
        b.occupancy.get_mut("D").unwrap().record(1, 30);
        let ab = a.merge(&b);
        assert_eq!(ab, b.merge(&a));
        assert_eq!(ab.ipc, 1.0);
        assert_eq!(ab.histogram(ShadowKind::D).total(), 40);
    }
}
