//! Two-pass assembler for the toy ISA.
//!
//! ```text
//! # comment
//! .fault_handler handler
//! start:  MOVI r1, 64
//!         LOAD r2, [r1+8]
//!         BLT  r2, 10, start
//!         HALT
//! .data 0x10000 rw
//! table:  .word 1, 2, start     # label operands resolve to addresses
//!         .zero 56
//! ```
//!
//! Directives: `.code`, `.data ADDR [ro|rw|priv]`, `.word`, `.byte`,
//! `.zero N`, `.align N`, `.rept N` / `.endr` and `.fault_handler LABEL`.
//! Labels on code lines name instruction indices; labels inside a data
//! segment name byte addresses and may be used as immediates.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{DataSegment, Instruction, Opcode, Operand, Perm, Program, CODE_BASE, INST_BYTES, NUM_REGS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: unresolved label `{label}`")]
    UnresolvedLabel { line: usize, label: String },
    #[error("line {line}: register index {index} out of range (0..16)")]
    BadRegister { line: usize, index: u64 },
    #[error("data segment at {base:#x} overlaps {other}")]
    Overlap { base: u64, other: String },
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

/// A value that may still refer to a label.
#[derive(Debug, Clone)]
enum Value {
    Num(i64),
    Sym(String),
}

#[derive(Debug, Clone)]
enum Src2 {
    Reg(u8),
    Val(Value),
}

#[derive(Debug, Clone)]
struct PendingInst {
    line: usize,
    op: Opcode,
    dst: u8,
    src1: u8,
    src2: Option<Src2>,
    mem_offset: i64,
    target: Option<String>,
}

#[derive(Debug)]
enum DataItem {
    Bytes(Vec<u8>),
    Word(usize, Value),
}

#[derive(Debug)]
struct PendingSegment {
    line: usize,
    base: u64,
    perm: Perm,
    items: Vec<DataItem>,
    len: u64,
}

enum Section {
    Code,
    Data(usize),
}

#[derive(Default)]
struct Symbols {
    code: BTreeMap<String, usize>,
    data: HashMap<String, u64>,
}

impl Symbols {
    fn define(&mut self, line: usize, name: &str) -> Result<(), AsmError> {
        if self.code.contains_key(name) || self.data.contains_key(name) {
            return Err(AsmError::DuplicateLabel { line, label: name.to_string() });
        }
        Ok(())
    }

    fn resolve(&self, line: usize, v: &Value) -> Result<i64, AsmError> {
        match v {
            Value::Num(n) => Ok(*n),
            Value::Sym(s) => {
                if let Some(&idx) = self.code.get(s) {
                    Ok(Program::pc_of(idx) as i64)
                } else if let Some(&addr) = self.data.get(s) {
                    Ok(addr as i64)
                } else {
                    Err(AsmError::UnresolvedLabel { line, label: s.clone() })
                }
            }
        }
    }
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let lines = expand_repeats(source)?;
    let mut insts: Vec<PendingInst> = Vec::new();
    let mut segments: Vec<PendingSegment> = Vec::new();
    let mut symbols = Symbols::default();
    let mut section = Section::Code;
    let mut fault_handler: Option<(usize, String)> = None;

    for (line_no, raw) in lines {
        let mut text = strip_comment(&raw).trim();
        // Leading labels (several may share a line).
        while let Some(pos) = label_split(text) {
            let name = text[..pos].trim();
            if !is_ident(name) {
                return Err(syntax(line_no, format!("invalid label `{name}`")));
            }
            symbols.define(line_no, name)?;
            match section {
                Section::Code => {
                    symbols.code.insert(name.to_string(), insts.len());
                }
                Section::Data(i) => {
                    let seg = &segments[i];
                    symbols.data.insert(name.to_string(), seg.base + seg.len);
                }
            }
            text = text[pos + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        if let Some(directive) = head.strip_prefix('.') {
            match directive {
                "code" => section = Section::Code,
                "data" => {
                    let mut parts = rest.split_whitespace();
                    let base = parts
                        .next()
                        .ok_or_else(|| syntax(line_no, ".data needs a base address"))
                        .and_then(|s| parse_number(line_no, s))? as u64;
                    let perm = match parts.next() {
                        None => Perm::UserWrite,
                        Some(p) => Perm::from_name(p)
                            .ok_or_else(|| syntax(line_no, format!("unknown permission `{p}`")))?,
                    };
                    segments.push(PendingSegment { line: line_no, base, perm, items: Vec::new(), len: 0 });
                    section = Section::Data(segments.len() - 1);
                }
                "fault_handler" => {
                    if !is_ident(rest) {
                        return Err(syntax(line_no, ".fault_handler needs a label"));
                    }
                    fault_handler = Some((line_no, rest.to_string()));
                }
                "align" => {
                    let n = parse_number(line_no, rest)? as u64;
                    if n == 0 || !n.is_power_of_two() {
                        return Err(syntax(line_no, ".align needs a power of two"));
                    }
                    match section {
                        Section::Code => {
                            while !Program::pc_of(insts.len()).is_multiple_of(n) {
                                insts.push(plain(line_no, Opcode::Nop));
                            }
                        }
                        Section::Data(i) => {
                            let seg = &mut segments[i];
                            let pad = (n - (seg.base + seg.len) % n) % n;
                            seg.items.push(DataItem::Bytes(vec![0; pad as usize]));
                            seg.len += pad;
                        }
                    }
                }
                "word" | "byte" | "zero" => {
                    let Section::Data(i) = section else {
                        return Err(syntax(line_no, format!(".{directive} outside a .data segment")));
                    };
                    let seg = &mut segments[i];
                    match directive {
                        "zero" => {
                            let n = parse_number(line_no, rest)? as usize;
                            seg.items.push(DataItem::Bytes(vec![0; n]));
                            seg.len += n as u64;
                        }
                        "byte" => {
                            let mut bytes = Vec::new();
                            for tok in split_operands(rest) {
                                bytes.push(parse_number(line_no, tok)? as u8);
                            }
                            seg.len += bytes.len() as u64;
                            seg.items.push(DataItem::Bytes(bytes));
                        }
                        _ => {
                            for tok in split_operands(rest) {
                                seg.items.push(DataItem::Word(line_no, parse_value(line_no, tok)?));
                                seg.len += 8;
                            }
                        }
                    }
                }
                other => return Err(syntax(line_no, format!("unknown directive `.{other}`"))),
            }
            continue;
        }
        if let Section::Data(_) = section {
            return Err(syntax(line_no, "instruction inside a .data segment"));
        }
        let op = Opcode::from_mnemonic(head).ok_or_else(|| AsmError::UnknownMnemonic {
            line: line_no,
            mnemonic: head.to_string(),
        })?;
        insts.push(parse_instruction(line_no, op, rest)?);
    }

    // Second pass: resolve symbols.
    let mut instructions = Vec::with_capacity(insts.len());
    for p in &insts {
        let target = match &p.target {
            None => None,
            Some(name) => match symbols.code.get(name) {
                Some(&idx) => Some(idx),
                None => match parse_number(p.line, name) {
                    Ok(pc) => {
                        let pc = pc as u64;
                        if pc < CODE_BASE || !(pc - CODE_BASE).is_multiple_of(INST_BYTES) {
                            return Err(syntax(p.line, format!("target {pc:#x} is not an instruction boundary")));
                        }
                        Some(((pc - CODE_BASE) / INST_BYTES) as usize)
                    }
                    Err(_) => return Err(AsmError::UnresolvedLabel { line: p.line, label: name.clone() }),
                },
            },
        };
        if let Some(t) = target {
            if t >= insts.len() {
                return Err(syntax(p.line, "branch target outside the program"));
            }
        }
        let src2 = match &p.src2 {
            None => Operand::None,
            Some(Src2::Reg(r)) => Operand::Reg(*r),
            Some(Src2::Val(v)) => Operand::Imm(symbols.resolve(p.line, v)?),
        };
        instructions.push(Instruction {
            op: p.op,
            dst: p.dst,
            src1: p.src1,
            src2,
            mem_offset: p.mem_offset,
            target,
        });
    }

    let mut data_segments = Vec::with_capacity(segments.len());
    for seg in &segments {
        let mut bytes = Vec::with_capacity(seg.len as usize);
        for item in &seg.items {
            match item {
                DataItem::Bytes(b) => bytes.extend_from_slice(b),
                DataItem::Word(line, v) => bytes.extend_from_slice(&symbols.resolve(*line, v)?.to_le_bytes()),
            }
        }
        let _ = seg.line;
        data_segments.push(DataSegment { base: seg.base, perm: seg.perm, bytes });
    }

    let fault_handler = match fault_handler {
        None => None,
        Some((line, name)) => Some(
            *symbols
                .code
                .get(&name)
                .ok_or(AsmError::UnresolvedLabel { line, label: name })?,
        ),
    };

    let program = Program {
        instructions,
        labels: symbols.code,
        data_segments,
        fault_handler,
    };
    check_layout(&program)?;
    Ok(program)
}

fn check_layout(program: &Program) -> Result<(), AsmError> {
    let code = (CODE_BASE, program.code_end().max(CODE_BASE + 1));
    let mut ranges: Vec<(u64, u64)> = program
        .data_segments
        .iter()
        .filter(|s| !s.bytes.is_empty())
        .map(|s| (s.base, s.end()))
        .collect();
    for &(b, e) in &ranges {
        if b < code.1 && code.0 < e {
            return Err(AsmError::Overlap { base: b, other: "the code region".into() });
        }
    }
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(AsmError::Overlap {
                base: w[1].0,
                other: format!("segment at {:#x}", w[0].0),
            });
        }
    }
    Ok(())
}

fn plain(line: usize, op: Opcode) -> PendingInst {
    PendingInst { line, op, dst: 0, src1: 0, src2: None, mem_offset: 0, target: None }
}

fn expand_repeats(source: &str) -> Result<Vec<(usize, String)>, AsmError> {
    let mut out = Vec::new();
    // Stack of (repeat count, collected lines).
    let mut stack: Vec<(usize, Vec<(usize, String)>)> = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let t = strip_comment(raw).trim();
        if let Some(rest) = t.strip_prefix(".rept") {
            let n = parse_number(line_no, rest.trim())?;
            if n < 0 {
                return Err(syntax(line_no, ".rept count must be non-negative"));
            }
            stack.push((n as usize, Vec::new()));
            continue;
        }
        if t == ".endr" {
            let (n, body) = stack.pop().ok_or_else(|| syntax(line_no, ".endr without .rept"))?;
            let target = match stack.last_mut() {
                Some((_, b)) => b,
                None => &mut out,
            };
            for _ in 0..n {
                target.extend(body.iter().cloned());
            }
            continue;
        }
        match stack.last_mut() {
            Some((_, b)) => b.push((line_no, raw.to_string())),
            None => out.push((line_no, raw.to_string())),
        }
    }
    if !stack.is_empty() {
        return Err(syntax(source.lines().count(), "unterminated .rept"));
    }
    Ok(out)
}

fn strip_comment(s: &str) -> &str {
    // '#' inside a character literal is not a comment.
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' if i + 2 < bytes.len() && bytes[i + 2] == b'\'' => i += 3,
            b'#' => return &s[..i],
            _ => i += 1,
        }
    }
    s
}

fn label_split(text: &str) -> Option<usize> {
    let pos = text.find(':')?;
    let name = text[..pos].trim();
    (!name.is_empty() && !name.contains(char::is_whitespace) && !name.contains('[')).then_some(pos)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_operands(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

fn parse_number(line: usize, s: &str) -> Result<i64, AsmError> {
    let s = s.trim();
    let bad = || syntax(line, format!("invalid number `{s}`"));
    if s.len() == 3 && s.starts_with('\'') && s.ends_with('\'') {
        return Ok(s.as_bytes()[1] as i64);
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let mag = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).map_err(|_| bad())?
    } else {
        body.replace('_', "").parse::<u64>().map_err(|_| bad())?
    };
    let v = mag as i64;
    Ok(if neg { v.wrapping_neg() } else { v })
}

fn parse_value(line: usize, s: &str) -> Result<Value, AsmError> {
    if is_ident(s) {
        Ok(Value::Sym(s.to_string()))
    } else {
        parse_number(line, s).map(Value::Num)
    }
}

fn parse_reg(line: usize, s: &str) -> Result<u8, AsmError> {
    let s = s.trim();
    let digits = s
        .strip_prefix('r')
        .or_else(|| s.strip_prefix('R'))
        .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
        .ok_or_else(|| syntax(line, format!("expected register, found `{s}`")))?;
    let index: u64 = digits.parse().map_err(|_| syntax(line, format!("bad register `{s}`")))?;
    if index >= NUM_REGS as u64 {
        return Err(AsmError::BadRegister { line, index });
    }
    Ok(index as u8)
}

fn is_reg(s: &str) -> bool {
    let s = s.trim();
    (s.starts_with('r') || s.starts_with('R')) && s.len() > 1 && s[1..].chars().all(|c| c.is_ascii_digit())
}

fn parse_src2(line: usize, s: &str) -> Result<Src2, AsmError> {
    if is_reg(s) {
        parse_reg(line, s).map(Src2::Reg)
    } else {
        parse_value(line, s).map(Src2::Val)
    }
}

/// `[rN]`, `[rN+off]` or `[rN-off]`.
fn parse_mem(line: usize, s: &str) -> Result<(u8, i64), AsmError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("expected memory operand, found `{s}`")))?
        .trim();
    if let Some(p) = inner.find(['+', '-']) {
        let reg = parse_reg(line, &inner[..p])?;
        let off = parse_number(line, inner[p + 1..].trim())?;
        Ok((reg, if &inner[p..p + 1] == "-" { off.wrapping_neg() } else { off }))
    } else {
        Ok((parse_reg(line, inner)?, 0))
    }
}

fn expect_count(line: usize, op: Opcode, ops: &[&str], n: usize) -> Result<(), AsmError> {
    if ops.len() != n {
        return Err(syntax(line, format!("{op} expects {n} operand(s), found {}", ops.len())));
    }
    Ok(())
}

fn parse_instruction(line: usize, op: Opcode, rest: &str) -> Result<PendingInst, AsmError> {
    let ops = split_operands(rest);
    let mut p = plain(line, op);
    match op {
        Opcode::Movi => {
            expect_count(line, op, &ops, 2)?;
            p.dst = parse_reg(line, ops[0])?;
            p.src2 = Some(Src2::Val(parse_value(line, ops[1])?));
        }
        _ if op.is_alu() => {
            expect_count(line, op, &ops, 3)?;
            p.dst = parse_reg(line, ops[0])?;
            p.src1 = parse_reg(line, ops[1])?;
            p.src2 = Some(parse_src2(line, ops[2])?);
        }
        Opcode::Load => {
            expect_count(line, op, &ops, 2)?;
            p.dst = parse_reg(line, ops[0])?;
            (p.src1, p.mem_offset) = parse_mem(line, ops[1])?;
        }
        Opcode::Store => {
            expect_count(line, op, &ops, 2)?;
            (p.src1, p.mem_offset) = parse_mem(line, ops[0])?;
            p.src2 = Some(Src2::Reg(parse_reg(line, ops[1])?));
        }
        Opcode::Clflush => {
            expect_count(line, op, &ops, 1)?;
            (p.src1, p.mem_offset) = parse_mem(line, ops[0])?;
        }
        Opcode::Beq | Opcode::Bne | Opcode::Blt => {
            expect_count(line, op, &ops, 3)?;
            p.src1 = parse_reg(line, ops[0])?;
            p.src2 = Some(parse_src2(line, ops[1])?);
            p.target = Some(ops[2].to_string());
        }
        Opcode::Jmp => {
            expect_count(line, op, &ops, 1)?;
            p.target = Some(ops[0].to_string());
        }
        Opcode::Jmpi => {
            expect_count(line, op, &ops, 1)?;
            p.src1 = parse_reg(line, ops[0])?;
        }
        Opcode::Rdtsc => {
            expect_count(line, op, &ops, 1)?;
            p.dst = parse_reg(line, ops[0])?;
        }
        _ => expect_count(line, op, &ops, 0)?,
    }
    Ok(p)
}

/// Renders instructions back to assembly text. Targets get synthetic
/// `L<index>` labels so the output reassembles to the same instruction list.
pub fn disassemble(program: &Program) -> String {
    let targets: std::collections::BTreeSet<usize> = program
        .instructions
        .iter()
        .filter_map(|i| i.target)
        .chain(program.fault_handler)
        .collect();
    let mut out = String::new();
    if let Some(h) = program.fault_handler {
        out.push_str(&format!(".fault_handler L{h}\n"));
    }
    for (idx, inst) in program.instructions.iter().enumerate() {
        if targets.contains(&idx) {
            out.push_str(&format!("L{idx}:\n"));
        }
        out.push_str("    ");
        out.push_str(&format_instruction(inst, |t| format!("L{t}")));
        out.push('\n');
    }
    out
}

pub(crate) fn format_instruction(inst: &Instruction, label: impl Fn(usize) -> String) -> String {
    let src2 = match inst.src2 {
        Operand::Reg(r) => format!("r{r}"),
        Operand::Imm(v) => format!("{v}"),
        Operand::None => String::new(),
    };
    let mem = |r: u8, off: i64| {
        if off < 0 {
            format!("[r{r}-{}]", off.unsigned_abs())
        } else {
            format!("[r{r}+{off}]")
        }
    };
    let target = inst.target.map(&label).unwrap_or_default();
    let m = inst.op.mnemonic();
    match inst.op {
        Opcode::Movi => format!("{m} r{}, {src2}", inst.dst),
        op if op.is_alu() => format!("{m} r{}, r{}, {src2}", inst.dst, inst.src1),
        Opcode::Load => format!("{m} r{}, {}", inst.dst, mem(inst.src1, inst.mem_offset)),
        Opcode::Store => format!("{m} {}, {src2}", mem(inst.src1, inst.mem_offset)),
        Opcode::Clflush => format!("{m} {}", mem(inst.src1, inst.mem_offset)),
        Opcode::Beq | Opcode::Bne | Opcode::Blt => format!("{m} r{}, {src2}, {target}", inst.src1),
        Opcode::Jmp => format!("{m} {target}"),
        Opcode::Jmpi => format!("{m} r{}", inst.src1),
        Opcode::Rdtsc => format!("{m} r{}", inst.dst),
        _ => m.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movi_then_halt() {
        let p = assemble("MOVI r1, 64\nHALT").unwrap();
        assert_eq!(p.instructions.len(), 2);
        assert_eq!(p.instructions[0].op, Opcode::Movi);
        assert_eq!(p.instructions[0].dst, 1);
        assert_eq!(p.instructions[0].src2, Operand::Imm(64));
        assert_eq!(p.instructions[1].op, Opcode::Halt);
    }

    #[test]
    fn self_loop_resolves_to_zero() {
        let p = assemble("L: JMP L").unwrap();
        assert_eq!(p.instructions[0].target, Some(0));
        assert_eq!(p.labels["L"], 0);
    }

    #[test]
    fn unknown_mnemonic_reports_line() {
        let err = assemble("LOAD r2, [r1+8]\nBADOP r0").unwrap_err();
        assert_eq!(err, AsmError::UnknownMnemonic { line: 2, mnemonic: "BADOP".into() });
    }

    #[test]
    fn error_paths() {
        assert!(matches!(assemble("a: NOP\na: NOP"), Err(AsmError::DuplicateLabel { line: 2, .. })));
        assert!(matches!(assemble("JMP nowhere"), Err(AsmError::UnresolvedLabel { line: 1, .. })));
        assert!(matches!(assemble("MOVI r16, 1"), Err(AsmError::BadRegister { line: 1, index: 16 })));
        assert!(matches!(assemble("ADD r1, r2"), Err(AsmError::Syntax { line: 1, .. })));
        assert!(matches!(
            assemble(".data 0x10000\n.zero 16\n.data 0x10008\n.zero 8"),
            Err(AsmError::Overlap { .. })
        ));
    }

    #[test]
    fn data_directives_and_label_values() {
        let src = "start: MOVI r1, table\n HALT\n.data 0x20000 ro\ntable: .word 7, start\n.byte 1, 'A'\n.align 16\nafter: .zero 8";
        let p = assemble(src).unwrap();
        assert_eq!(p.instructions[0].src2, Operand::Imm(0x20000));
        let seg = &p.data_segments[0];
        assert_eq!(seg.perm, Perm::UserRead);
        assert_eq!(&seg.bytes[0..8], &7u64.to_le_bytes());
        assert_eq!(&seg.bytes[8..16], &CODE_BASE.to_le_bytes());
        assert_eq!(&seg.bytes[16..18], &[1, b'A']);
        assert_eq!(seg.bytes.len(), 32 + 8);
    }

    #[test]
    fn rept_and_code_align() {
        let p = assemble(".rept 3\nNOP\n.endr\n.align 64\nend: HALT").unwrap();
        assert_eq!(p.labels["end"], 16);
        assert_eq!(p.instructions.len(), 17);
    }

    #[test]
    fn memory_operands() {
        let p = assemble("LOAD r2, [r1-16]\nSTORE [r3], r4\nCLFLUSH [r5+0x40]").unwrap();
        assert_eq!((p.instructions[0].src1, p.instructions[0].mem_offset), (1, -16));
        assert_eq!(p.instructions[1].src2, Operand::Reg(4));
        assert_eq!(p.instructions[2].mem_offset, 0x40);
    }

    #[test]
    fn disassembly_reassembles() {
        let src = ".fault_handler h\ntop: ADD r1, r1, 1\nBLT r1, 10, top\nJMPI r2\nh: LOAD r3, [r0-8]\nHALT";
        let p = assemble(src).unwrap();
        let q = assemble(&disassemble(&p)).unwrap();
        assert_eq!(p.instructions, q.instructions);
        assert_eq!(p.fault_handler, q.fault_handler);
    }
}
