//! In-order reference interpreter. No speculation, no timing model: the
//! cycle counter is the number of executed instructions.

use std::collections::BTreeMap;

use super::{Instruction, Opcode, Operand, Perm, Program, NUM_REGS, WORD_BYTES};
use crate::memsys::{PageTable, PAGE_BYTES};

/// Sparse byte-addressable physical memory image.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    /// Loads every data segment of `program`, translating segment addresses
    /// through `page_table` (unmapped bytes are placed at their virtual address).
    pub fn from_program(program: &Program, page_table: &PageTable) -> Self {
        let mut mem = Memory::new();
        for seg in &program.data_segments {
            for (i, &b) in seg.bytes.iter().enumerate() {
                let va = seg.base + i as u64;
                let pa = page_table.translate(va).map(|t| t.pa).unwrap_or(va);
                mem.write_u8(pa, b);
            }
        }
        mem
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr / PAGE_BYTES))
            .map(|p| p[(addr % PAGE_BYTES) as usize])
            .unwrap_or(0)
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr / PAGE_BYTES)
            .or_insert_with(|| vec![0u8; PAGE_BYTES as usize].into_boxed_slice());
        page[(addr % PAGE_BYTES) as usize] = value;
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.read_u8(addr.wrapping_add(i as u64));
        }
        u64::from_le_bytes(bytes)
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) {
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    /// Non-zero bytes in address order.
    pub fn nonzero_bytes(&self) -> impl Iterator<Item = (u64, u8)> + '_ {
        self.pages.iter().flat_map(|(&page, bytes)| {
            bytes
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0)
                .map(move |(i, &b)| (page * PAGE_BYTES + i as u64, b))
        })
    }

    /// Copy of this image with every byte in `[start, end)` cleared.
    pub fn without_range(&self, start: u64, end: u64) -> Memory {
        let mut out = self.clone();
        for (&page, bytes) in out.pages.iter_mut() {
            let base = page * PAGE_BYTES;
            for (i, b) in bytes.iter_mut().enumerate() {
                let a = base + i as u64;
                if a >= start && a < end {
                    *b = 0;
                }
            }
        }
        out
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.nonzero_bytes().eq(other.nonzero_bytes())
    }
}

impl Eq for Memory {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchState {
    pub regs: [u64; NUM_REGS],
    pub pc: u64,
    pub mem: Memory,
    pub cycle: u64,
    pub halted: bool,
    pub fault_count: u64,
}

impl ArchState {
    pub fn new(program: &Program, page_table: &PageTable) -> Self {
        ArchState {
            regs: [0; NUM_REGS],
            pc: Program::pc_of(0),
            mem: Memory::from_program(program, page_table),
            cycle: 0,
            halted: false,
            fault_count: 0,
        }
    }

    /// The architecturally compared part of the state: registers, memory and
    /// fault count.
    pub fn same_architecture(&self, other: &ArchState) -> bool {
        self.regs == other.regs && self.mem == other.mem && self.fault_count == other.fault_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Plain,
    Load { va: u64, pa: u64 },
    Store { va: u64, pa: u64 },
    Flush { va: u64, pa: u64 },
}

/// One executed (retired) instruction, in program order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub pc: u64,
    pub kind: TraceKind,
    pub faulted: bool,
}

pub(crate) fn alu(op: Opcode, a: u64, b: u64) -> u64 {
    match op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Xor => a ^ b,
        Opcode::Shl => a.wrapping_shl((b & 63) as u32),
        Opcode::Shr => a.wrapping_shr((b & 63) as u32),
        Opcode::Mul => a.wrapping_mul(b),
        _ => unreachable!("{op} is not an ALU op"),
    }
}

/// Conditional branch outcome; `BLT` compares unsigned.
pub(crate) fn branch_taken(op: Opcode, a: u64, b: u64) -> bool {
    match op {
        Opcode::Beq => a == b,
        Opcode::Bne => a != b,
        Opcode::Blt => a < b,
        _ => unreachable!("{op} is not a conditional branch"),
    }
}

pub(crate) fn effective_address(inst: &Instruction, base: u64) -> u64 {
    base.wrapping_add(inst.mem_offset as u64)
}

pub(crate) fn src2_value(inst: &Instruction, regs: &[u64; NUM_REGS]) -> u64 {
    match inst.src2 {
        Operand::Reg(r) => regs[r as usize],
        Operand::Imm(v) => v as u64,
        Operand::None => 0,
    }
}

/// Permission check for a committed access; `Err` means the access faults.
pub(crate) fn check_access(page_table: &PageTable, va: u64, kind: Opcode) -> Result<u64, ()> {
    let t = page_table.translate(va).ok_or(())?;
    let aligned = va.is_multiple_of(WORD_BYTES);
    match kind {
        Opcode::Load if aligned && t.perm != Perm::Privileged => Ok(t.pa),
        Opcode::Store if aligned && t.perm == Perm::UserWrite => Ok(t.pa),
        Opcode::Clflush => Ok(t.pa),
        _ => Err(()),
    }
}

pub fn interpret(program: &Program, max_steps: u64, page_table: &PageTable) -> ArchState {
    interpret_traced(program, max_steps, page_table).0
}

/// Same as [`interpret`], also returning the retired-instruction trace.
pub fn interpret_traced(program: &Program, max_steps: u64, page_table: &PageTable) -> (ArchState, Vec<TraceRecord>) {
    assert!(max_steps > 0, "max_steps must be positive");
    let mut st = ArchState::new(program, page_table);
    let mut trace = Vec::new();
    while !st.halted && st.cycle < max_steps {
        let Some(idx) = program.index_of(st.pc) else {
            break;
        };
        let inst = program.instructions[idx];
        let step = st.cycle;
        st.cycle += 1;
        let a = st.regs[inst.src1 as usize];
        let b = src2_value(&inst, &st.regs);
        let next = st.pc + super::INST_BYTES;
        let mut rec = TraceRecord { pc: st.pc, kind: TraceKind::Plain, faulted: false };
        let mut fault = false;
        let mut new_pc = next;
        match inst.op {
            Opcode::Movi => st.regs[inst.dst as usize] = b,
            op if op.is_alu() => st.regs[inst.dst as usize] = alu(op, a, b),
            Opcode::Load => {
                let va = effective_address(&inst, a);
                match check_access(page_table, va, Opcode::Load) {
                    Ok(pa) => {
                        st.regs[inst.dst as usize] = st.mem.read_u64(pa);
                        rec.kind = TraceKind::Load { va, pa };
                    }
                    Err(()) => fault = true,
                }
            }
            Opcode::Store => {
                let va = effective_address(&inst, a);
                match check_access(page_table, va, Opcode::Store) {
                    Ok(pa) => {
                        st.mem.write_u64(pa, b);
                        rec.kind = TraceKind::Store { va, pa };
                    }
                    Err(()) => fault = true,
                }
            }
            Opcode::Clflush => {
                let va = effective_address(&inst, a);
                match check_access(page_table, va, Opcode::Clflush) {
                    Ok(pa) => rec.kind = TraceKind::Flush { va, pa },
                    Err(()) => fault = true,
                }
            }
            Opcode::Beq | Opcode::Bne | Opcode::Blt => {
                if branch_taken(inst.op, a, b) {
                    new_pc = Program::pc_of(inst.target.expect("branch without target"));
                }
            }
            Opcode::Jmp => new_pc = Program::pc_of(inst.target.expect("JMP without target")),
            Opcode::Jmpi => {
                if program.index_of(a).is_some() {
                    new_pc = a;
                } else {
                    fault = true;
                }
            }
            Opcode::Rdtsc => st.regs[inst.dst as usize] = step,
            Opcode::Fence | Opcode::Nop => {}
            Opcode::Halt => {
                st.halted = true;
                new_pc = st.pc;
            }
            _ => unreachable!(),
        }
        if fault {
            rec.faulted = true;
            rec.kind = TraceKind::Plain;
            st.fault_count += 1;
            match program.fault_handler_pc() {
                Some(h) => new_pc = h,
                None => {
                    st.halted = true;
                    new_pc = st.pc;
                }
            }
        }
        trace.push(rec);
        st.pc = new_pc;
    }
    (st, trace)
}
