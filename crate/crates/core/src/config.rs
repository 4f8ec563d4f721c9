//! Machine configuration. Defaults model the SkyLake-like machine; the file
//! form is a flat TOML `key = value` document with every key optional.

use serde::{Deserialize, Serialize};

use crate::bpu::BpuConfig;
use crate::memsys::{CacheGeometry, MemoryConfig};
use crate::safespec::{FullPolicy, Mode, Preset, ShadowConfig, ShadowKind};

pub const DEFAULT_MAX_CYCLES: u64 = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fetch_width: usize,
    pub dispatch_width: usize,
    pub issue_width: usize,
    pub commit_width: usize,
    pub iq: usize,
    pub rob: usize,
    pub ldq: usize,
    pub stq: usize,
    /// Cycles from fetch to dispatch. The pipeline is fetch_depth + 2 deep
    /// (dispatch, issue); 10 gives the 12-stage abstraction.
    pub fetch_depth: u64,
    pub alu_latency: u64,
    pub mul_latency: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fetch_width: 6,
            dispatch_width: 6,
            issue_width: 6,
            commit_width: 6,
            iq: 96,
            rob: 224,
            ldq: 72,
            stq: 56,
            fetch_depth: 10,
            alu_latency: 1,
            mul_latency: 3,
        }
    }
}

impl PipelineConfig {
    pub fn depth(&self) -> u64 {
        self.fetch_depth + 2
    }

    pub fn frontend_capacity(&self) -> usize {
        self.fetch_width * self.fetch_depth.max(1) as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub pipeline: PipelineConfig,
    pub memory: MemoryConfig,
    pub bpu: BpuConfig,
    pub shadow: ShadowConfig,
}

impl MachineConfig {
    pub fn with_mode(mode: Mode) -> Self {
        let mut c = MachineConfig::default();
        c.shadow.mode = mode;
        c
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = &self.pipeline;
        let widths = [p.fetch_width, p.dispatch_width, p.issue_width, p.commit_width, p.iq, p.rob, p.ldq, p.stq];
        if widths.contains(&0) {
            return Err("pipeline widths and capacities must be non-zero".into());
        }
        self.memory.validate()?;
        if self.bpu.k > 24 || self.bpu.btb_size == 0 {
            return Err("bpu_k must be <= 24 and btb_size non-zero".into());
        }
        if self.shadow.capacities.contains(&0) {
            return Err("shadow capacities must be non-zero".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<(MachineConfig, Option<u64>), String> {
        let flat: FlatConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        flat.apply()
    }
}

/// On-disk form. Unknown keys are rejected by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    fetch_width: Option<usize>,
    dispatch_width: Option<usize>,
    issue_width: Option<usize>,
    commit_width: Option<usize>,
    iq: Option<usize>,
    rob: Option<usize>,
    ldq: Option<usize>,
    stq: Option<usize>,
    fetch_depth: Option<u64>,
    alu_latency: Option<u64>,
    mul_latency: Option<u64>,
    l1i_size: Option<u64>,
    l1i_ways: Option<usize>,
    l1i_latency: Option<u32>,
    l1d_size: Option<u64>,
    l1d_ways: Option<usize>,
    l1d_latency: Option<u32>,
    l2_size: Option<u64>,
    l2_ways: Option<usize>,
    l2_latency: Option<u32>,
    l3_size: Option<u64>,
    l3_ways: Option<usize>,
    l3_latency: Option<u32>,
    mem_latency: Option<u32>,
    itlb_entries: Option<usize>,
    dtlb_entries: Option<usize>,
    tlb_latency: Option<u32>,
    bpu_k: Option<u32>,
    btb_size: Option<usize>,
    mode: Option<String>,
    preset: Option<String>,
    shadow_d: Option<usize>,
    shadow_i: Option<usize>,
    shadow_dtlb: Option<usize>,
    shadow_itlb: Option<usize>,
    full_policy: Option<String>,
    shadow_latency: Option<u32>,
    max_cycles: Option<u64>,
}

fn set<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn geometry(g: &mut CacheGeometry, size: Option<u64>, ways: Option<usize>, lat: Option<u32>) {
    set(&mut g.size_bytes, size);
    set(&mut g.ways, ways);
    set(&mut g.hit_latency, lat);
}

impl FlatConfig {
    fn apply(self) -> Result<(MachineConfig, Option<u64>), String> {
        let mut c = MachineConfig::default();
        let p = &mut c.pipeline;
        set(&mut p.fetch_width, self.fetch_width);
        set(&mut p.dispatch_width, self.dispatch_width);
        set(&mut p.issue_width, self.issue_width);
        set(&mut p.commit_width, self.commit_width);
        set(&mut p.iq, self.iq);
        set(&mut p.rob, self.rob);
        set(&mut p.ldq, self.ldq);
        set(&mut p.stq, self.stq);
        set(&mut p.fetch_depth, self.fetch_depth);
        set(&mut p.alu_latency, self.alu_latency);
        set(&mut p.mul_latency, self.mul_latency);
        let m = &mut c.memory;
        geometry(&mut m.l1i, self.l1i_size, self.l1i_ways, self.l1i_latency);
        geometry(&mut m.l1d, self.l1d_size, self.l1d_ways, self.l1d_latency);
        geometry(&mut m.l2, self.l2_size, self.l2_ways, self.l2_latency);
        geometry(&mut m.l3, self.l3_size, self.l3_ways, self.l3_latency);
        set(&mut m.mem_latency, self.mem_latency);
        set(&mut m.itlb_entries, self.itlb_entries);
        set(&mut m.dtlb_entries, self.dtlb_entries);
        set(&mut m.tlb_hit_latency, self.tlb_latency);
        set(&mut c.bpu.k, self.bpu_k);
        set(&mut c.bpu.btb_size, self.btb_size);

        let mode = self.mode.as_deref().map(str::parse::<Mode>).transpose()?.unwrap_or(c.shadow.mode);
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?.unwrap_or(Preset::WorstCase);
        let policy = self.full_policy.as_deref().map(str::parse::<FullPolicy>).transpose()?.unwrap_or(FullPolicy::Block);
        c.shadow = ShadowConfig::with_preset(mode, preset, policy);
        let explicit = [
            (ShadowKind::D, self.shadow_d),
            (ShadowKind::I, self.shadow_i),
            (ShadowKind::DTlb, self.shadow_dtlb),
            (ShadowKind::ITlb, self.shadow_itlb),
        ];
        for (k, v) in explicit {
            if let Some(v) = v {
                c.shadow.capacities[k.index()] = v;
                c.shadow.preset = Preset::Custom;
            }
        }
        set(&mut c.shadow.shadow_latency, self.shadow_latency);
        c.validate()?;
        Ok((c, self.max_cycles))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_machine() {
        let (c, budget) = MachineConfig::from_toml("").unwrap();
        assert_eq!(c, MachineConfig::default());
        assert_eq!(budget, None);
        assert_eq!(c.memory.l3, CacheGeometry::new(2 * 1024 * 1024, 16, 44));
        assert_eq!((c.pipeline.iq, c.pipeline.rob, c.pipeline.ldq, c.pipeline.stq), (96, 224, 72, 56));
    }

    #[test]
    fn keys_override_and_unknown_keys_are_named() {
        let (c, _) = MachineConfig::from_toml("mode = \"wfb\"\npreset = \"sized\"\nshadow_d = 40\nrob = 128").unwrap();
        assert_eq!(c.shadow.mode, Mode::Wfb);
        assert_eq!(c.shadow.capacities, [40, 25, 25, 10]);
        assert_eq!(c.pipeline.rob, 128);
        let err = MachineConfig::from_toml("rob_sz = 3").unwrap_err();
        assert!(err.contains("rob_sz"), "{err}");
        assert!(MachineConfig::from_toml("mode = \"fast\"").is_err());
        assert!(MachineConfig::from_toml("l1d_size = 1000").is_err());
    }
}
