use std::collections::BTreeMap;

use crate::isa::{Perm, Program, CODE_BASE};

pub const PAGE_BYTES: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;

/// Physical region holding the 2-level page table. Walk reads of
/// page-directory lines come from here.
pub const WALK_PD_BASE: u64 = 0x7000_0000_0000;
/// Physical region holding the leaf page-table lines.
pub const WALK_PT_BASE: u64 = 0x7800_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageEntry {
    pub ppn: u64,
    pub perm: Perm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Translation {
    pub vpn: u64,
    pub ppn: u64,
    pub pa: u64,
    pub perm: Perm,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PageTable {
    map: BTreeMap<u64, PageEntry>,
}

impl PageTable {
    pub fn new() -> Self {
        PageTable::default()
    }

    /// Identity mapping for the code pages (read-only) and every data segment
    /// (with the segment's permission). A page shared by two segments keeps
    /// the most permissive user permission unless one of them is privileged.
    pub fn for_program(program: &Program) -> Self {
        let mut pt = PageTable::new();
        if !program.instructions.is_empty() {
            for vpn in CODE_BASE >> PAGE_SHIFT..=(program.code_end() - 1) >> PAGE_SHIFT {
                pt.map_identity(vpn, Perm::UserRead);
            }
        }
        for seg in &program.data_segments {
            if seg.bytes.is_empty() {
                continue;
            }
            for vpn in seg.base >> PAGE_SHIFT..=(seg.end() - 1) >> PAGE_SHIFT {
                let perm = match (pt.map.get(&vpn).map(|e| e.perm), seg.perm) {
                    (Some(Perm::Privileged), _) | (_, Perm::Privileged) => Perm::Privileged,
                    (Some(Perm::UserWrite), _) => Perm::UserWrite,
                    (_, p) => p,
                };
                pt.map_identity(vpn, perm);
            }
        }
        pt
    }

    pub fn map(&mut self, vpn: u64, ppn: u64, perm: Perm) {
        self.map.insert(vpn, PageEntry { ppn, perm });
    }

    pub fn map_identity(&mut self, vpn: u64, perm: Perm) {
        self.map(vpn, vpn, perm);
    }

    pub fn entry(&self, vpn: u64) -> Option<PageEntry> {
        self.map.get(&vpn).copied()
    }

    pub fn translate(&self, va: u64) -> Option<Translation> {
        let vpn = va >> PAGE_SHIFT;
        self.entry(vpn).map(|e| Translation {
            vpn,
            ppn: e.ppn,
            pa: (e.ppn << PAGE_SHIFT) | (va & (PAGE_BYTES - 1)),
            perm: e.perm,
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, PageEntry)> + '_ {
        self.map.iter().map(|(&v, &e)| (v, e))
    }
}

/// The two dependent line reads of a walk for `vpn`: page-directory line,
/// then page-table line. 512 translations share a directory slot and eight
/// consecutive pages share a page-table line.
pub fn walk_lines(vpn: u64) -> [u64; 2] {
    let pd = WALK_PD_BASE.wrapping_add(((vpn >> 9) * 8) & !63);
    let pt = WALK_PT_BASE.wrapping_add((vpn.wrapping_mul(8)) & !63);
    [pd, pt]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    #[test]
    fn program_pages_are_identity_mapped() {
        let p = assemble("HALT\n.data 0x10000 priv\n.byte 1\n.data 0x20ff8 rw\n.zero 16").unwrap();
        let pt = PageTable::for_program(&p);
        assert_eq!(pt.translate(CODE_BASE).unwrap().perm, Perm::UserRead);
        assert_eq!(pt.translate(0x10000).unwrap().perm, Perm::Privileged);
        assert_eq!(pt.translate(0x20ff8).unwrap().pa, 0x20ff8);
        assert_eq!(pt.translate(0x21000).unwrap().perm, Perm::UserWrite);
        assert!(pt.translate(0x30000).is_none());
    }

    #[test]
    fn walk_lines_share_as_documented() {
        assert_eq!(walk_lines(0)[1], walk_lines(7)[1]);
        assert_ne!(walk_lines(7)[1], walk_lines(8)[1]);
        assert_eq!(walk_lines(0)[0], walk_lines(511)[0]);
        assert_eq!(walk_lines(8 * 512)[0], walk_lines(0)[0] + 64);
    }
}
