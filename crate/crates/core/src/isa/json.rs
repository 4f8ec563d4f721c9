//! Versioned JSON form of a [`Program`]. Opcodes are mnemonic strings and
//! every address is a `0x`-prefixed hex string.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataSegment, Instruction, Opcode, Operand, Perm, Program, NUM_REGS};

pub const PROGRAM_SCHEMA: &str = "safespec-program/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramDoc {
    version: String,
    instructions: Vec<InstDoc>,
    labels: BTreeMap<String, String>,
    data_segments: Vec<SegmentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault_handler: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstDoc {
    op: Opcode,
    #[serde(default)]
    dst: u8,
    #[serde(default)]
    src1: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src2_reg: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src2_imm: Option<i64>,
    #[serde(default)]
    mem_offset: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    base: String,
    perm: Perm,
    bytes: String,
}

fn hex(v: u64) -> String {
    format!("{v:#x}")
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let body = s.strip_prefix("0x").ok_or_else(|| format!("address `{s}` is not 0x-prefixed"))?;
    u64::from_str_radix(body, 16).map_err(|e| format!("address `{s}`: {e}"))
}

fn pc_to_index(program_len: usize, s: &str) -> Result<usize, String> {
    let pc = parse_hex(s)?;
    let idx = pc
        .checked_sub(super::CODE_BASE)
        .filter(|off| off % super::INST_BYTES == 0)
        .map(|off| (off / super::INST_BYTES) as usize);
    idx.filter(|&i| i < program_len).ok_or_else(|| format!("{s} is not an instruction address"))
}

pub fn program_to_json(program: &Program) -> String {
    let doc = ProgramDoc {
        version: PROGRAM_SCHEMA.to_string(),
        instructions: program
            .instructions
            .iter()
            .map(|i| InstDoc {
                op: i.op,
                dst: i.dst,
                src1: i.src1,
                src2_reg: match i.src2 {
                    Operand::Reg(r) => Some(r),
                    _ => None,
                },
                src2_imm: match i.src2 {
                    Operand::Imm(v) => Some(v),
                    _ => None,
                },
                mem_offset: i.mem_offset,
                target: i.target.map(|t| hex(Program::pc_of(t))),
            })
            .collect(),
        labels: program.labels.iter().map(|(k, &v)| (k.clone(), hex(Program::pc_of(v)))).collect(),
        data_segments: program
            .data_segments
            .iter()
            .map(|s| SegmentDoc {
                base: hex(s.base),
                perm: s.perm,
                bytes: s.bytes.iter().map(|b| format!("{b:02x}")).collect(),
            })
            .collect(),
        fault_handler: program.fault_handler.map(|h| hex(Program::pc_of(h))),
    };
    serde_json::to_string_pretty(&doc).expect("program serializes")
}

pub fn program_from_json(text: &str) -> Result<Program, String> {
    let doc: ProgramDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.version != PROGRAM_SCHEMA {
        return Err(format!("unsupported program schema `{}`", doc.version));
    }
    let n = doc.instructions.len();
    let mut instructions = Vec::with_capacity(n);
    for d in doc.instructions {
        let src2 = match (d.src2_reg, d.src2_imm) {
            (None, None) => Operand::None,
            (Some(r), None) => Operand::Reg(r),
            (None, Some(v)) => Operand::Imm(v),
            (Some(_), Some(_)) => return Err("instruction has both src2_reg and src2_imm".into()),
        };
        if [d.dst, d.src1].iter().chain(d.src2_reg.iter()).any(|&r| r as usize >= NUM_REGS) {
            return Err("register index out of range".into());
        }
        let target = d.target.as_deref().map(|t| pc_to_index(n, t)).transpose()?;
        instructions.push(Instruction { op: d.op, dst: d.dst, src1: d.src1, src2, mem_offset: d.mem_offset, target });
    }
    let labels = doc
        .labels
        .iter()
        .map(|(k, v)| Ok((k.clone(), pc_to_index(n, v)?)))
        .collect::<Result<_, String>>()?;
    let data_segments = doc
        .data_segments
        .iter()
        .map(|s| {
            if s.bytes.len() % 2 != 0 {
                return Err("odd-length byte string".to_string());
            }
            let bytes = (0..s.bytes.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&s.bytes[i..i + 2], 16).map_err(|e| e.to_string()))
                .collect::<Result<Vec<u8>, String>>()?;
            Ok(DataSegment { base: parse_hex(&s.base)?, perm: s.perm, bytes })
        })
        .collect::<Result<_, String>>()?;
    let fault_handler = doc.fault_handler.as_deref().map(|h| pc_to_index(n, h)).transpose()?;
    Ok(Program { instructions, labels, data_segments, fault_handler })
}
