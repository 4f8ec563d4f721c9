use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub size_bytes: u64,
    pub ways: usize,
    pub line_bytes: u64,
    pub hit_latency: u32,
}

impl CacheGeometry {
    pub const fn new(size_bytes: u64, ways: usize, hit_latency: u32) -> Self {
        CacheGeometry { size_bytes, ways, line_bytes: 64, hit_latency }
    }

    pub fn num_sets(&self) -> usize {
        (self.size_bytes / (self.ways as u64 * self.line_bytes)) as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ways == 0 || self.line_bytes == 0 {
            return Err("cache ways and line size must be non-zero".into());
        }
        let per_set = self.ways as u64 * self.line_bytes;
        if self.size_bytes == 0 || !self.size_bytes.is_multiple_of(per_set) {
            return Err(format!("cache size {} is not a multiple of ways x line", self.size_bytes));
        }
        if !self.num_sets().is_power_of_two() {
            return Err(format!("cache set count {} is not a power of two", self.num_sets()));
        }
        Ok(())
    }

    /// Set index for a byte or line address.
    pub fn set_index(&self, addr: u64) -> usize {
        ((addr / self.line_bytes) % self.num_sets() as u64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheName {
    L1I,
    L1D,
    L2,
    L3,
}

impl CacheName {
    pub fn name(self) -> &'static str {
        match self {
            CacheName::L1I => "L1I",
            CacheName::L1D => "L1D",
            CacheName::L2 => "L2",
            CacheName::L3 => "L3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Way {
    /// Line address (the full address with the offset bits cleared).
    pub tag: u64,
    pub valid: bool,
    /// 0 is most recently used.
    pub lru_rank: usize,
}

/// One set-associative level with true LRU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLevel {
    pub name: CacheName,
    pub geometry: CacheGeometry,
    sets: Vec<Vec<Way>>,
}

impl CacheLevel {
    pub fn new(name: CacheName, geometry: CacheGeometry) -> Self {
        let ways = (0..geometry.ways).map(|r| Way { tag: 0, valid: false, lru_rank: r }).collect::<Vec<_>>();
        CacheLevel { name, geometry, sets: vec![ways; geometry.num_sets()] }
    }

    pub fn line_of(&self, addr: u64) -> u64 {
        addr & !(self.geometry.line_bytes - 1)
    }

    fn find(&self, line: u64) -> Option<(usize, usize)> {
        let s = self.geometry.set_index(line);
        self.sets[s].iter().position(|w| w.valid && w.tag == line).map(|w| (s, w))
    }

    pub fn contains(&self, line: u64) -> bool {
        self.find(line).is_some()
    }

    fn make_mru(&mut self, set: usize, way: usize) {
        let old = self.sets[set][way].lru_rank;
        for w in self.sets[set].iter_mut() {
            if w.lru_rank < old {
                w.lru_rank += 1;
            }
        }
        self.sets[set][way].lru_rank = 0;
    }

    /// Marks `line` most recently used; returns false if it is absent.
    pub fn touch(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, w)) => {
                self.make_mru(s, w);
                true
            }
            None => false,
        }
    }

    /// Installs `line` as MRU (or touches it if present). Returns the evicted
    /// line, if a valid one had to go.
    pub fn insert(&mut self, line: u64) -> Option<u64> {
        if self.touch(line) {
            return None;
        }
        let s = self.geometry.set_index(line);
        let set = &self.sets[s];
        let victim = set
            .iter()
            .enumerate()
            .filter(|(_, w)| !w.valid)
            .max_by_key(|(_, w)| w.lru_rank)
            .or_else(|| set.iter().enumerate().max_by_key(|(_, w)| w.lru_rank))
            .map(|(i, _)| i)
            .expect("sets have at least one way");
        let evicted = set[victim].valid.then_some(set[victim].tag);
        self.sets[s][victim].tag = line;
        self.sets[s][victim].valid = true;
        self.make_mru(s, victim);
        evicted
    }

    pub fn invalidate(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, w)) => {
                self.sets[s][w].valid = false;
                true
            }
            None => false,
        }
    }

    pub fn set(&self, index: usize) -> &[Way] {
        &self.sets[index]
    }

    pub fn valid_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.sets.iter().flatten().filter(|w| w.valid).map(|w| w.tag)
    }

    /// Valid ways only, as (set, tag, lru_rank); the comparable state of the level.
    pub fn snapshot(&self) -> Vec<(usize, u64, usize)> {
        let mut out = Vec::new();
        for (s, set) in self.sets.iter().enumerate() {
            for w in set.iter().filter(|w| w.valid) {
                out.push((s, w.tag, w.lru_rank));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (s, set) in self.sets.iter().enumerate() {
            let mut ranks: Vec<usize> = set.iter().map(|w| w.lru_rank).collect();
            ranks.sort_unstable();
            if ranks != (0..set.len()).collect::<Vec<_>>() {
                return Err(format!("{} set {s}: lru ranks not a permutation", self.name.name()));
            }
            let mut tags: Vec<u64> = set.iter().filter(|w| w.valid).map(|w| w.tag).collect();
            let n = tags.len();
            tags.sort_unstable();
            tags.dedup();
            if tags.len() != n {
                return Err(format!("{} set {s}: duplicate tag", self.name.name()));
            }
            if tags.iter().any(|&t| self.geometry.set_index(t) != s) {
                return Err(format!("{} set {s}: line in wrong set", self.name.name()));
            }
        }
        Ok(())
    }
}
