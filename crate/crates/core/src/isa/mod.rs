//! The toy instruction set executed by the simulator.
//!
//! Instructions are fixed-size (4 bytes of code address space each) and live
//! in a single code region starting at [`CODE_BASE`]. Memory operations move
//! 8-byte little-endian words and must be naturally aligned.
//!
//! Fault semantics, shared by the in-order interpreter and the out-of-order
//! core (where the fault is raised when the instruction reaches commit):
//!
//! | instruction | condition                                   | effect            |
//! |-------------|---------------------------------------------|-------------------|
//! | LOAD        | page unmapped, address misaligned           | fault             |
//! | LOAD        | page `priv`                                 | fault             |
//! | STORE       | page unmapped, misaligned, not `rw`         | fault             |
//! | CLFLUSH     | page unmapped                               | fault             |
//! | JMPI        | target not an instruction of the program    | fault             |
//!
//! A fault leaves the destination register and memory untouched, increments
//! `fault_count` and continues at the program's fault handler. Without a
//! handler the machine halts.

mod asm;
mod interp;
mod json;

pub use asm::{assemble, disassemble, AsmError};
pub(crate) use interp::{alu, branch_taken, check_access, effective_address};
pub use interp::{interpret, interpret_traced, ArchState, Memory, TraceKind, TraceRecord};
pub use json::{program_from_json, program_to_json, PROGRAM_SCHEMA};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// First code address. Data segments must not overlap the code region.
pub const CODE_BASE: u64 = 0x0040_0000;
/// Bytes of code address space per instruction.
pub const INST_BYTES: u64 = 4;
pub const NUM_REGS: usize = 16;
pub const WORD_BYTES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Opcode {
    Movi,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Mul,
    Load,
    Store,
    Beq,
    Bne,
    Blt,
    Jmp,
    Jmpi,
    Clflush,
    Rdtsc,
    Fence,
    Nop,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 21] = [
        Opcode::Movi,
        Opcode::Add,
        Opcode::Sub,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Mul,
        Opcode::Load,
        Opcode::Store,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Jmp,
        Opcode::Jmpi,
        Opcode::Clflush,
        Opcode::Rdtsc,
        Opcode::Fence,
        Opcode::Nop,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Movi => "MOVI",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::Mul => "MUL",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
            Opcode::Beq => "BEQ",
            Opcode::Bne => "BNE",
            Opcode::Blt => "BLT",
            Opcode::Jmp => "JMP",
            Opcode::Jmpi => "JMPI",
            Opcode::Clflush => "CLFLUSH",
            Opcode::Rdtsc => "RDTSC",
            Opcode::Fence => "FENCE",
            Opcode::Nop => "NOP",
            Opcode::Halt => "HALT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(s))
    }

    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Shr
                | Opcode::Mul
        )
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Blt)
    }

    pub fn is_control(self) -> bool {
        self.is_conditional() || matches!(self, Opcode::Jmp | Opcode::Jmpi)
    }

    /// Whether the instruction writes `dst`.
    pub fn writes_dst(self) -> bool {
        self.is_alu() || matches!(self, Opcode::Movi | Opcode::Load | Opcode::Rdtsc)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Second source operand: a register or an immediate, never both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    None,
    Reg(u8),
    Imm(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    pub dst: u8,
    pub src1: u8,
    pub src2: Operand,
    pub mem_offset: i64,
    /// Instruction index of the branch/JMP target.
    pub target: Option<usize>,
}

impl Instruction {
    pub fn new(op: Opcode) -> Self {
        Instruction {
            op,
            dst: 0,
            src1: 0,
            src2: Operand::None,
            mem_offset: 0,
            target: None,
        }
    }

    pub fn nop() -> Self {
        Instruction::new(Opcode::Nop)
    }

    /// Registers read by this instruction, in operand order.
    pub fn source_regs(&self) -> (Option<u8>, Option<u8>) {
        let src2 = match self.src2 {
            Operand::Reg(r) => Some(r),
            _ => None,
        };
        match self.op {
            Opcode::Movi | Opcode::Jmp | Opcode::Rdtsc | Opcode::Fence | Opcode::Nop | Opcode::Halt => {
                (None, None)
            }
            Opcode::Load | Opcode::Clflush | Opcode::Jmpi => (Some(self.src1), None),
            _ => (Some(self.src1), src2),
        }
    }
}

/// Page permission. `Privileged` pages are readable by the page walker and
/// by speculative loads, but a committed user-mode access faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perm {
    #[serde(rename = "ro")]
    UserRead,
    #[serde(rename = "rw")]
    UserWrite,
    #[serde(rename = "priv")]
    Privileged,
}

impl Perm {
    pub fn from_name(s: &str) -> Option<Perm> {
        match s {
            "ro" => Some(Perm::UserRead),
            "rw" => Some(Perm::UserWrite),
            "priv" => Some(Perm::Privileged),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Perm::UserRead => "ro",
            Perm::UserWrite => "rw",
            Perm::Privileged => "priv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSegment {
    pub base: u64,
    pub perm: Perm,
    pub bytes: Vec<u8>,
}

impl DataSegment {
    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub data_segments: Vec<DataSegment>,
    /// Instruction index of the fault handler.
    pub fault_handler: Option<usize>,
}

impl Program {
    pub fn pc_of(index: usize) -> u64 {
        CODE_BASE + index as u64 * INST_BYTES
    }

    /// Instruction index for a code address, if it names an instruction.
    pub fn index_of(&self, pc: u64) -> Option<usize> {
        if pc < CODE_BASE || !(pc - CODE_BASE).is_multiple_of(INST_BYTES) {
            return None;
        }
        let idx = ((pc - CODE_BASE) / INST_BYTES) as usize;
        (idx < self.instructions.len()).then_some(idx)
    }

    pub fn code_end(&self) -> u64 {
        Program::pc_of(self.instructions.len())
    }

    pub fn label_pc(&self, name: &str) -> Option<u64> {
        self.labels.get(name).map(|&i| Program::pc_of(i))
    }

    pub fn fault_handler_pc(&self) -> Option<u64> {
        self.fault_handler.map(Program::pc_of)
    }
}
