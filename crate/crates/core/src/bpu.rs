//! Branch prediction: a table of 2-bit saturating counters and a
//! direct-mapped BTB. `poison` is the attacker's direct write access to both.

use serde::{Deserialize, Serialize};

use crate::isa::INST_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchKind {
    Conditional,
    Indirect,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub taken: bool,
    pub target: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpuConfig {
    /// log2 of the counter table size.
    pub k: u32,
    pub btb_size: usize,
}

impl Default for BpuConfig {
    fn default() -> Self {
        BpuConfig { k: 10, btb_size: 512 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BtbEntry {
    tag: u64,
    target: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bpu {
    config: BpuConfig,
    counters: Vec<u8>,
    btb: Vec<Option<BtbEntry>>,
}

impl Bpu {
    pub fn new(config: BpuConfig) -> Self {
        assert!(config.k <= 24 && config.btb_size > 0, "bad predictor geometry");
        Bpu { config, counters: vec![1; 1 << config.k], btb: vec![None; config.btb_size] }
    }

    fn counter_index(&self, pc: u64) -> usize {
        ((pc >> 2) & ((1u64 << self.config.k) - 1)) as usize
    }

    fn btb_index(&self, pc: u64) -> usize {
        ((pc >> 2) % self.config.btb_size as u64) as usize
    }

    pub fn counter(&self, pc: u64) -> u8 {
        self.counters[self.counter_index(pc)]
    }

    pub fn btb_target(&self, pc: u64) -> Option<u64> {
        self.btb[self.btb_index(pc)].filter(|e| e.tag == pc).map(|e| e.target)
    }

    /// `encoded_target` is the instruction's own target (ignored for
    /// indirect branches). An indirect BTB miss predicts taken to the next
    /// instruction.
    pub fn predict(&self, pc: u64, kind: BranchKind, encoded_target: u64) -> Prediction {
        match kind {
            BranchKind::Conditional => Prediction { taken: self.counter(pc) >= 2, target: encoded_target },
            BranchKind::Indirect => Prediction {
                taken: true,
                target: self.btb_target(pc).unwrap_or(pc + INST_BYTES),
            },
            BranchKind::Direct => Prediction { taken: true, target: encoded_target },
        }
    }

    pub fn update(&mut self, pc: u64, taken: bool, actual_target: u64) {
        let i = self.counter_index(pc);
        let c = &mut self.counters[i];
        *c = if taken { (*c + 1).min(3) } else { c.saturating_sub(1) };
        if taken {
            let b = self.btb_index(pc);
            self.btb[b] = Some(BtbEntry { tag: pc, target: actual_target });
        }
    }

    pub fn poison(&mut self, pc: u64, target: u64, taken: bool) {
        let b = self.btb_index(pc);
        self.btb[b] = Some(BtbEntry { tag: pc, target });
        let i = self.counter_index(pc);
        self.counters[i] = if taken { 3 } else { 0 };
    }
}
