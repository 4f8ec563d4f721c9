use crate::isa::Perm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TlbEntry {
    pub vpn: u64,
    pub ppn: u64,
    pub perm: Perm,
    /// 0 is most recently used.
    pub lru_rank: usize,
}

/// Fully associative TLB with true LRU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tlb {
    capacity: usize,
    entries: Vec<TlbEntry>,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "TLB capacity must be non-zero");
        Tlb { capacity, entries: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, vpn: u64) -> Option<&TlbEntry> {
        self.entries.iter().find(|e| e.vpn == vpn)
    }

    fn make_mru(&mut self, idx: usize) {
        let old = self.entries[idx].lru_rank;
        for e in self.entries.iter_mut() {
            if e.lru_rank < old {
                e.lru_rank += 1;
            }
        }
        self.entries[idx].lru_rank = 0;
    }

    pub fn touch(&mut self, vpn: u64) -> bool {
        match self.entries.iter().position(|e| e.vpn == vpn) {
            Some(i) => {
                self.make_mru(i);
                true
            }
            None => false,
        }
    }

    /// Inserts (or refreshes) a translation as MRU; returns the evicted vpn.
    pub fn insert(&mut self, vpn: u64, ppn: u64, perm: Perm) -> Option<u64> {
        if let Some(i) = self.entries.iter().position(|e| e.vpn == vpn) {
            self.entries[i].ppn = ppn;
            self.entries[i].perm = perm;
            self.make_mru(i);
            return None;
        }
        if self.entries.len() < self.capacity {
            let rank = self.entries.len();
            self.entries.push(TlbEntry { vpn, ppn, perm, lru_rank: rank });
            let i = self.entries.len() - 1;
            self.make_mru(i);
            return None;
        }
        let i = self
            .entries
            .iter()
            .position(|e| e.lru_rank == self.capacity - 1)
            .expect("full TLB has an LRU entry");
        let evicted = self.entries[i].vpn;
        self.entries[i] = TlbEntry { vpn, ppn, perm, lru_rank: self.entries[i].lru_rank };
        self.make_mru(i);
        Some(evicted)
    }

    pub fn flush_all(&mut self) {
        self.entries.clear();
    }

    /// (vpn, ppn, perm, lru_rank) sorted by vpn.
    pub fn snapshot(&self) -> Vec<(u64, u64, Perm, usize)> {
        let mut v: Vec<_> = self.entries.iter().map(|e| (e.vpn, e.ppn, e.perm, e.lru_rank)).collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err("TLB over capacity".into());
        }
        let mut ranks: Vec<usize> = self.entries.iter().map(|e| e.lru_rank).collect();
        ranks.sort_unstable();
        if ranks != (0..self.entries.len()).collect::<Vec<_>>() {
            return Err("TLB lru ranks not a permutation".into());
        }
        let mut vpns: Vec<u64> = self.entries.iter().map(|e| e.vpn).collect();
        vpns.sort_unstable();
        vpns.dedup();
        if vpns.len() != self.entries.len() {
            return Err("duplicate vpn in TLB".into());
        }
        Ok(())
    }
}
