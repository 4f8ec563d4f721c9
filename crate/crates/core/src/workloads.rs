//! Bundled synthetic workloads used by `sweep` and the performance checks.
//!
//! * `pointer-chase`: a dependent walk over a 512 KiB ring of 64-byte
//!   nodes visited with a large co-prime stride, so most hops miss L1/L2.
//! * `streaming`: 3072 instructions of straight-line code, executed once,
//!   summing a 24 KiB array sequentially.
//! * `branchy`: 8192 iterations over a 2 KiB table whose bits, from a
//!   multiplicative hash, decide the branch directions.
//! * `mixed`: loads, stores, multiplies and a data-dependent branch.

use crate::isa::{assemble, Program};

#[derive(Clone, Debug)]
pub struct Workload {
    pub name: &'static str,
    pub source: String,
}

impl Workload {
    pub fn program(&self) -> Program {
        assemble(&self.source).expect("bundled workload assembles")
    }
}

pub const NAMES: [&str; 4] = ["pointer-chase", "streaming", "branchy", "mixed"];

pub fn all() -> Vec<Workload> {
    NAMES.iter().map(|n| by_name(n).expect("bundled name")).collect()
}

pub fn by_name(name: &str) -> Option<Workload> {
    let source = match name {
        "pointer-chase" => pointer_chase(),
        "streaming" => streaming(),
        "branchy" => branchy(),
        "mixed" => mixed(),
        _ => return None,
    };
    let name = NAMES.into_iter().find(|&n| n == name)?;
    Some(Workload { name, source })
}

fn words(values: impl IntoIterator<Item = u64>) -> String {
    let mut out = String::new();
    for chunk in values.into_iter().collect::<Vec<_>>().chunks(8) {
        let row: Vec<String> = chunk.iter().map(|v| format!("{v:#x}")).collect();
        out += &format!("        .word {}\n", row.join(", "));
    }
    out
}

fn pointer_chase() -> String {
    const BASE: u64 = 0x100000;
    const NODES: u64 = 8192;
    const STRIDE: u64 = 3001;
    // Node i occupies one line; its first word points at node i + STRIDE.
    let mut data = String::new();
    for i in 0..NODES {
        let next = BASE + ((i + STRIDE) % NODES) * 64;
        data += &format!("        .word {next:#x}\n        .zero 56\n");
    }
    format!(
        "        MOVI r1, {BASE:#x}
        MOVI r2, 0
loop:   LOAD r1, [r1]
        ADD  r3, r3, r1
        ADD  r2, r2, 1
        BLT  r2, 3000, loop
        HALT
.data {BASE:#x} rw
{data}"
    )
}

fn streaming() -> String {
    format!(
        "        MOVI r1, 0x200000
        MOVI r3, 0
.rept 1024
        LOAD r2, [r1]
        ADD  r3, r3, r2
        ADD  r1, r1, 8
.endr
        HALT
.data 0x200000 rw
{}",
        words((0..1024u64).map(|i| i * 7 + 1))
    )
}

/// Bit pattern with no short period: bit i of a multiplicative hash.
fn hashed_bits(n: u64) -> impl Iterator<Item = u64> {
    (0..n).map(|i| (i.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 61) & 1)
}

fn branchy() -> String {
    format!(
        "        MOVI r1, 0x300000
        MOVI r2, 0
        MOVI r5, 0
loop:   AND  r4, r2, 255
        SHL  r4, r4, 3
        ADD  r4, r4, r1
        LOAD r6, [r4]
        BEQ  r6, 0, zero
        ADD  r5, r5, 3
        JMP  next
zero:   XOR  r5, r5, r2
next:   AND  r7, r2, 3
        BNE  r7, 0, skip
        ADD  r5, r5, 1
skip:   ADD  r2, r2, 1
        BLT  r2, 8192, loop
        HALT
.data 0x300000 rw
{}",
        words(hashed_bits(256))
    )
}

fn mixed() -> String {
    format!(
        "        MOVI r1, 0x500000
        MOVI r2, 0
        MOVI r5, 1
loop:   AND  r3, r2, 511
        SHL  r4, r3, 3
        ADD  r4, r4, r1
        LOAD r6, [r4]
        MUL  r5, r5, r6
        ADD  r5, r5, r2
        STORE [r4+8192], r5
        AND  r7, r6, 1
        BEQ  r7, 0, even
        SHR  r5, r5, 1
even:   ADD  r2, r2, 1
        BLT  r2, 3000, loop
        HALT
.data 0x500000 rw
{}        .zero 8192
",
        words((0..512u64).map(|i| i.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 40 | 1))
    )
}
