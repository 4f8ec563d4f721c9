//! Attack program generation. Every scenario is built once per secret byte
//! so each byte runs on a fresh machine.

use super::Scenario;
use crate::isa::{assemble, Program};
use crate::memsys::PageTable;

pub const ARRAY1: u64 = 0x10_0000;
pub const ARRAY1_LEN: u64 = 16;
/// Head of a chain of [`SIZE_CHAIN`] dependent words, one per line, whose
/// last one holds `array1_size`.
pub const SIZE: u64 = 0x10_1000;
pub const SIZE_CHAIN: u64 = 10;
/// Address of `array1_size` itself.
pub const SIZE_WORD: u64 = SIZE + 64 * (SIZE_CHAIN - 1);
pub const FNPTR: u64 = 0x10_2000;
pub const SECRET: u64 = 0x11_0000;
pub const ARRAY2: u64 = 0x20_0000;
pub const TROJAN: u64 = 0x30_0000;
/// Pages walked just before each dTLB spy so the shared directory line is hot.
pub const TOUCH: u64 = 0x60_0000;
pub const SPY: u64 = 0x34_0000;
pub const TIMING: u64 = 0x80_0000;
pub const SLOTS: usize = 256;
pub const SLOT_STRIDE: u64 = 64;
/// Calibration window plus one window per bit.
pub const TSA_WINDOWS: usize = 9;
pub const TSA_TROJAN_LINES: u64 = 40;
pub const TSA_TROJAN_PAGES: u64 = 30;
const PAGE: u64 = 4096;
const SPY_TLB_WINDOW: u64 = 16 * PAGE;
const SPY_TLB_SECOND: u64 = 8 * PAGE;

/// A BTB entry the harness installs before the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Poison {
    pub pc: u64,
    pub target: u64,
    pub taken: bool,
}

#[derive(Clone, Debug)]
pub struct BuiltAttack {
    pub program: Program,
    pub page_table: PageTable,
    pub prep: Vec<Poison>,
    /// Words written by the program's receiver, starting at [`TIMING`].
    pub timing_words: usize,
}

impl BuiltAttack {
    /// Byte range holding receiver timings; it differs between the
    /// interpreter and the timing model by construction.
    pub fn timing_range(&self) -> (u64, u64) {
        (TIMING, TIMING + 8 * self.timing_words as u64)
    }
}

/// `array1` index that reaches byte `k` of the secret.
pub fn oob_index(k: usize) -> u64 {
    (SECRET - ARRAY1) / 8 + k as u64
}

#[derive(Default)]
struct Asm {
    text: String,
    labels: usize,
}

impl Asm {
    fn op(&mut self, s: &str) {
        self.text.push_str("        ");
        self.text.push_str(s);
        self.text.push('\n');
    }

    fn label(&mut self, name: &str) {
        self.text.push_str(name);
        self.text.push_str(":\n");
    }

    fn fresh(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}_{}", self.labels)
    }

    fn raw(&mut self, s: &str) {
        self.text.push_str(s);
        self.text.push('\n');
    }

    /// Roughly `n` cycles of spinning on `r1`.
    fn delay(&mut self, n: u64) {
        let l = self.fresh("delay");
        self.op(&format!("MOVI r1, {n}"));
        self.label(&l);
        self.op("SUB  r1, r1, 1");
        self.op(&format!("BNE  r1, 0, {l}"));
    }

    /// CLFLUSH `count` lines `stride` apart from `base`, using r1/r2.
    fn flush(&mut self, base: u64, count: u64, stride: u64) {
        let l = self.fresh("flush");
        self.op(&format!("MOVI r1, {base:#x}"));
        self.op(&format!("MOVI r2, {:#x}", base + count * stride));
        self.label(&l);
        self.op("CLFLUSH [r1]");
        self.op(&format!("ADD  r1, r1, {stride}"));
        self.op(&format!("BLT  r1, r2, {l}"));
    }

    /// Flush+reload receiver over the probe array. Each slot's load address
    /// depends on the first timestamp so it cannot run ahead of it.
    fn probe(&mut self) {
        let l = self.fresh("probe");
        self.op("MOVI r3, 0");
        self.op(&format!("MOVI r13, {TIMING:#x}"));
        self.label(&l);
        self.op("SHL  r1, r3, 6");
        self.op(&format!("ADD  r1, r1, {ARRAY2:#x}"));
        self.op("RDTSC r10");
        self.op("AND  r11, r10, 0");
        self.op("ADD  r1, r1, r11");
        self.op("LOAD r2, [r1]");
        self.op("RDTSC r11");
        self.op("SUB  r11, r11, r10");
        self.op("STORE [r13], r11");
        self.op("ADD  r13, r13, 8");
        self.op("ADD  r3, r3, 1");
        self.op(&format!("BLT  r3, {SLOTS}, {l}"));
    }

    /// Clears timestamp-derived registers so the final architectural state
    /// matches the untimed interpreter, then halts.
    fn finish(&mut self) {
        for r in [1, 2, 10, 11] {
            self.op(&format!("MOVI r{r}, 0"));
        }
        self.op("HALT");
    }

    /// Warms the dTLB for the probe array pages without caching any slot.
    fn warm_probe_pages(&mut self) {
        self.op(&format!("MOVI r1, {ARRAY2:#x}"));
        for p in 0..(SLOTS as u64 * SLOT_STRIDE).div_ceil(PAGE) {
            self.op(&format!("LOAD r2, [r1+{}]", p * PAGE));
        }
        self.op("FENCE");
        self.flush(ARRAY2, SLOTS as u64, SLOT_STRIDE);
    }
}

fn words(values: &[u64]) -> String {
    let list: Vec<String> = values.iter().map(|v| format!("{v:#x}")).collect();
    format!("        .word {}\n", list.join(", "))
}

fn secret_segment(secret: &[u8], perm: &str) -> String {
    let v: Vec<u64> = secret.iter().map(|&b| b as u64).collect();
    format!(".data {SECRET:#x} {perm}\n{}", words(&v))
}

fn common_data(array1: &[u64]) -> String {
    let mut s = format!(".data {ARRAY1:#x} rw\n{}", words(array1));
    s += &format!(".data {SIZE:#x} rw\n");
    for i in 1..SIZE_CHAIN {
        s += &words(&[SIZE + 64 * i]);
        s += "        .zero 56\n";
    }
    s += &words(&[ARRAY1_LEN]);
    s += &format!(".data {ARRAY2:#x} rw\n        .zero {}\n", SLOTS as u64 * SLOT_STRIDE);
    s
}

fn timing_segment(words: usize) -> String {
    format!(".data {TIMING:#x} rw\n        .zero {}\n", words * 8)
}

pub fn build(scenario: Scenario, secret: &[u8], k: usize) -> BuiltAttack {
    assert!(k < secret.len(), "byte index out of range");
    let (source, words) = match scenario {
        Scenario::SpectreV1 => (spectre_v1(secret, k), SLOTS),
        Scenario::SpectreV2 => (spectre_v2(secret, k), SLOTS),
        Scenario::Meltdown => (meltdown(secret, k), SLOTS),
        Scenario::ICache => (icache(secret, k), SLOTS),
        Scenario::TsaDcache => (tsa(secret, k, false), TSA_WINDOWS),
        Scenario::TsaDtlb => (tsa(secret, k, true), TSA_WINDOWS),
    };
    let program = assemble(&source).unwrap_or_else(|e| panic!("{} program: {e}", scenario.name()));
    let prep = match scenario {
        Scenario::SpectreV2 => vec![Poison {
            pc: program.label_pc("call").expect("call label"),
            target: program.label_pc("gadget").expect("gadget label"),
            taken: true,
        }],
        Scenario::ICache => {
            let junk = program.label_pc("junk").expect("junk label");
            (0..SLOTS)
                .map(|c| Poison { pc: program.label_pc(&format!("site_{c}")).expect("call site"), target: junk, taken: true })
                .collect()
        }
        _ => Vec::new(),
    };
    let page_table = PageTable::for_program(&program);
    BuiltAttack { program, page_table, prep, timing_words: words }
}

/// Bounds-check bypass: train the check in-bounds, flush the size, then
/// call with an out-of-bounds index.
fn spectre_v1(secret: &[u8], k: usize) -> String {
    let mut a = Asm::default();
    a.op(&format!("MOVI r14, {:#x}", SECRET + 8 * k as u64));
    a.op("LOAD r2, [r14]");
    a.op("MOVI r3, 0");
    a.label("train");
    a.op("AND  r4, r3, 15");
    a.op("MOVI r15, tret");
    a.op("JMP  victim");
    a.label("tret");
    a.op("ADD  r3, r3, 1");
    a.op("BLT  r3, 16, train");
    a.delay(300);
    a.op("FENCE");
    a.warm_probe_pages();
    a.op(&format!("MOVI r1, {SIZE_WORD:#x}"));
    a.op("CLFLUSH [r1]");
    a.op("FENCE");
    a.op(&format!("MOVI r4, {:#x}", oob_index(k)));
    a.op("MOVI r15, aret");
    a.op("JMP  victim");
    a.label("aret");
    a.delay(400);
    a.op("FENCE");
    a.probe();
    a.finish();
    a.label("victim");
    a.op(&format!("MOVI r6, {SIZE_WORD:#x}"));
    a.op("LOAD r5, [r6]");
    a.op("BLT  r4, r5, gadget");
    a.op("JMPI r15");
    a.label("gadget");
    a.op("SHL  r7, r4, 3");
    a.op(&format!("ADD  r7, r7, {ARRAY1:#x}"));
    a.op("LOAD r8, [r7]");
    a.op("SHL  r8, r8, 6");
    a.op(&format!("ADD  r8, r8, {ARRAY2:#x}"));
    a.op("LOAD r9, [r8]");
    a.op("JMPI r15");
    let array1: Vec<u64> = (0..ARRAY1_LEN).collect();
    format!("{}{}{}{}", a.text, common_data(&array1), secret_segment(secret, "rw"), timing_segment(SLOTS))
}

/// Branch target injection: the harness poisons the BTB entry of the
/// victim's indirect call so it speculatively enters the gadget, which
/// dereferences the victim's secret pointer.
fn spectre_v2(secret: &[u8], k: usize) -> String {
    let mut a = Asm::default();
    a.op(&format!("MOVI r4, {:#x}", SECRET + 8 * k as u64));
    a.op("LOAD r2, [r4]");
    a.warm_probe_pages();
    a.op(&format!("MOVI r6, {FNPTR:#x}"));
    a.op("CLFLUSH [r6]");
    a.op("FENCE");
    a.op("LOAD r7, [r6]");
    a.label("call");
    a.op("JMPI r7");
    a.label("benign");
    a.delay(400);
    a.op("FENCE");
    a.probe();
    a.finish();
    a.label("gadget");
    a.op("LOAD r8, [r4]");
    a.op("SHL  r8, r8, 6");
    a.op(&format!("ADD  r8, r8, {ARRAY2:#x}"));
    a.op("LOAD r9, [r8]");
    a.op("HALT");
    let data = format!("{}.data {FNPTR:#x} rw\n        .word benign\n", common_data(&[0; ARRAY1_LEN as usize]));
    format!("{}{data}{}{}", a.text, secret_segment(secret, "rw"), timing_segment(SLOTS))
}

/// Rogue data cache load: a privileged load executes behind a slow chain of
/// dependent loads, its value feeds the probe access, and the fault handler
/// retries once before probing.
fn meltdown(secret: &[u8], k: usize) -> String {
    let target = SECRET + 8 * k as u64;
    let mut a = Asm::default();
    a.raw(".fault_handler handler");
    a.op("MOVI r12, 0");
    a.warm_probe_pages();
    a.op(&format!("MOVI r3, {target:#x}"));
    a.op("CLFLUSH [r3]");
    a.label("attempt");
    let chain = SIZE + 64 * (SIZE_CHAIN - 3);
    a.flush(chain, 3, 64);
    a.op("FENCE");
    a.op(&format!("MOVI r5, {chain:#x}"));
    a.op("LOAD r5, [r5]");
    a.op("LOAD r5, [r5]");
    a.op("LOAD r5, [r5]");
    a.op(&format!("MOVI r3, {target:#x}"));
    a.op("LOAD r2, [r3]");
    a.op("SHL  r2, r2, 6");
    a.op(&format!("ADD  r2, r2, {ARRAY2:#x}"));
    a.op("LOAD r9, [r2]");
    a.op("HALT");
    a.label("handler");
    a.op("ADD  r12, r12, 1");
    a.op("BLT  r12, 2, attempt");
    a.delay(400);
    a.op("FENCE");
    a.probe();
    a.finish();
    format!("{}{}{}{}", a.text, common_data(&[0; ARRAY1_LEN as usize]), secret_segment(secret, "priv"), timing_segment(SLOTS))
}

/// Instruction-cache variant: the gadget dispatches on the secret byte to
/// one of 256 NOP-sled functions through an indirect call whose BTB entry
/// points at a third location, so only the resolved, secret-dependent
/// target leaves an I-cache footprint. The receiver times a call to each
/// function after warming its page with a stub on the same page.
fn icache(secret: &[u8], k: usize) -> String {
    let mut a = Asm::default();
    a.op(&format!("MOVI r12, {FNPTR:#x}"));
    a.op("MOVI r3, 0");
    a.label("preload");
    a.op("SHL  r1, r3, 3");
    a.op("ADD  r1, r1, r12");
    a.op("LOAD r2, [r1]");
    a.op("ADD  r3, r3, 1");
    a.op(&format!("BLT  r3, {SLOTS}, preload"));
    a.op(&format!("MOVI r1, {ARRAY1:#x}"));
    a.op("LOAD r2, [r1]");
    a.op(&format!("MOVI r14, {:#x}", SECRET + 8 * k as u64));
    a.op("LOAD r2, [r14]");
    a.op("MOVI r3, 0");
    a.label("train");
    a.op("MOVI r4, 0");
    a.op("MOVI r15, tret");
    a.op("JMP  victim");
    a.label("tret");
    a.op("ADD  r3, r3, 1");
    a.op("BLT  r3, 16, train");
    a.delay(300);
    a.op("FENCE");
    a.flush(SIZE, SIZE_CHAIN, 64);
    a.op("FENCE");
    a.op(&format!("MOVI r4, {:#x}", oob_index(k)));
    a.op("MOVI r15, aret");
    a.op("JMP  victim");
    a.label("aret");
    a.delay(800);
    a.op("FENCE");
    a.op(&format!("MOVI r13, {TIMING:#x}"));
    for i in 0..SLOTS {
        a.op(&format!("MOVI r15, warm_{i}"));
        a.op(&format!("JMP  stub_{i}"));
        a.label(&format!("warm_{i}"));
        a.op("RDTSC r10");
        a.op(&format!("MOVI r15, ret_{i}"));
        a.op(&format!("JMP  func_{i}"));
        a.label(&format!("ret_{i}"));
        a.op("RDTSC r11");
        a.op("SUB  r11, r11, r10");
        a.op("STORE [r13], r11");
        a.op("ADD  r13, r13, 8");
    }
    a.finish();

    a.label("victim");
    a.op(&format!("MOVI r5, {SIZE:#x}"));
    for _ in 0..SIZE_CHAIN {
        a.op("LOAD r5, [r5]");
    }
    a.op("BLT  r4, r5, gadget");
    a.op("JMPI r15");
    a.label("gadget");
    a.op("SHL  r7, r4, 3");
    a.op(&format!("ADD  r7, r7, {ARRAY1:#x}"));
    a.op("LOAD r8, [r7]");
    a.op("SHR  r9, r8, 4");
    for h in 0..16 {
        a.label(&format!("hi_{h}"));
        a.op(&format!("BNE  r9, {h}, hi_{}", h + 1));
        a.op(&format!("JMP  lo_{h}_0"));
    }
    a.label("hi_16");
    a.op("JMPI r15");
    for h in 0..16 {
        for l in 0..16 {
            let c = h * 16 + l;
            a.label(&format!("lo_{h}_{l}"));
            a.op(&format!("BNE  r8, {c}, lo_{h}_{}", l + 1));
            a.op("SHL  r14, r8, 3");
            a.op("ADD  r14, r14, r12");
            a.op("LOAD r14, [r14]");
            a.label(&format!("site_{c}"));
            a.op("JMPI r14");
        }
        a.label(&format!("lo_{h}_16"));
        a.op("JMPI r15");
    }
    a.label("junk");
    a.op("HALT");
    for i in 0..SLOTS {
        a.op(".align 4096");
        a.label(&format!("func_{i}"));
        a.op(".rept 256");
        a.op("NOP");
        a.op(".endr");
        a.op("JMPI r15");
        a.op("HALT");
        a.op(".align 64");
        a.label(&format!("stub_{i}"));
        a.op("JMPI r15");
        a.op("HALT");
    }
    // Entry 256 catches the training value 256 on wrong paths.
    let table: Vec<String> = (0..SLOTS).map(|i| format!("func_{i}")).chain(["junk".to_string()]).collect();
    let data = format!("{}.data {FNPTR:#x} rw\n        .word {}\n", common_data(&[256; ARRAY1_LEN as usize]), table.join(", "));
    format!("{}{data}{}{}", a.text, secret_segment(secret, "rw"), timing_segment(SLOTS))
}

/// Transient speculative attack through a shared shadow table. Inside one
/// speculation window the trojan (mis-speculated, reading one secret bit)
/// fills the table while the spy, older and destined to commit, times two
/// loads that each need a new entry. Window 0 is an in-bounds calibration.
fn tsa(secret: &[u8], k: usize, tlb: bool) -> String {
    let mut a = Asm::default();
    a.op(&format!("MOVI r14, {:#x}", SECRET + 8 * k as u64));
    a.op("LOAD r2, [r14]");
    // Warms the trojan page translation (and the directory line shared by
    // every spy page); the d-cache variant also reuses one spy page.
    a.op(&format!("MOVI r1, {TROJAN:#x}"));
    a.op("CLFLUSH [r1]");
    if !tlb {
        a.op(&format!("MOVI r1, {SPY:#x}"));
        a.op("CLFLUSH [r1]");
    }
    // One architectural pass through the trojan, aimed at a spare region,
    // brings its code into the i-cache.
    let trojan_bytes = if tlb { TSA_TROJAN_PAGES * PAGE } else { PAGE };
    a.op(&format!("MOVI r14, {:#x}", TROJAN + trojan_bytes));
    a.op("MOVI r4, 1");
    a.op("MOVI r6, 0");
    a.op(&format!("MOVI r0, {}", TSA_WINDOWS + 1));
    a.op("MOVI r15, warmed");
    a.op("JMP  victim");
    a.label("warmed");
    a.op(&format!("MOVI r14, {TROJAN:#x}"));
    a.op(&format!("MOVI r13, {TIMING:#x}"));
    a.op("MOVI r12, 0");
    a.label("window");
    // r0 picks the spy slot: training shares one, each window has its own.
    a.op(&format!("MOVI r0, {}", TSA_WINDOWS + 2));
    a.op("MOVI r3, 0");
    a.label("train");
    a.op("MOVI r4, 0");
    a.op("MOVI r6, 0");
    a.op("MOVI r15, tret");
    a.op("JMP  victim");
    a.label("tret");
    a.op("ADD  r3, r3, 1");
    a.op("BLT  r3, 4, train");
    a.op("FENCE");
    a.op(&format!("MOVI r1, {SIZE_WORD:#x}"));
    a.op("CLFLUSH [r1]");
    if !tlb {
        a.op(&format!("MOVI r1, {SPY:#x}"));
        a.op("CLFLUSH [r1]");
        a.op("CLFLUSH [r1+64]");
    }
    a.op(&format!("MOVI r1, {:#x}", SECRET + 8 * k as u64));
    a.op("LOAD r1, [r1]");
    a.op("FENCE");
    a.op("MOVI r4, 0");
    a.op("MOVI r6, 0");
    a.op("BEQ  r12, 0, go");
    a.op(&format!("MOVI r4, {:#x}", oob_index(k)));
    a.op("SUB  r6, r12, 1");
    a.label("go");
    a.op("ADD  r0, r12, 1");
    a.op("MOVI r15, wret");
    a.op("JMP  victim");
    a.label("wret");
    a.op("STORE [r13], r11");
    a.op("ADD  r13, r13, 8");
    a.op("ADD  r12, r12, 1");
    a.op(&format!("BLT  r12, {TSA_WINDOWS}, window"));
    a.finish();

    a.label("victim");
    if tlb {
        a.op("SHL  r7, r0, 15");
        a.op(&format!("ADD  r7, r7, {TOUCH:#x}"));
        a.op("LOAD r8, [r7]");
    }
    a.op("FENCE");
    a.op("RDTSC r10");
    a.op("AND  r1, r10, 0");
    a.op("ADD  r1, r1, 1");
    a.op("MOVI r2, 1");
    // Chain A (25 MULs) gates the spy; chain B (35 MULs) keeps an older
    // instruction in flight so the spy is never at the ROB head.
    for i in 0..35 {
        if i < 25 {
            a.op("MUL  r1, r1, 1");
        }
        a.op("MUL  r2, r2, 1");
    }
    if tlb {
        // Fresh pages every window, each under its own page-table line.
        // Each slot also sits at its own line offset to spread cache sets.
        a.op("SHL  r9, r0, 16");
        a.op("ADD  r9, r9, r1");
        a.op("SHL  r7, r0, 7");
        a.op("ADD  r9, r9, r7");
        a.op(&format!("ADD  r9, r9, {:#x}", SPY - 1));
        a.op("LOAD r8, [r9]");
        a.op(&format!("LOAD r8, [r9+{}]", SPY_TLB_SECOND));
    } else {
        a.op(&format!("ADD  r9, r1, {:#x}", SPY - 1));
        a.op("LOAD r8, [r9]");
        a.op("LOAD r8, [r9+64]");
    }
    a.op("RDTSC r11");
    a.op("SUB  r11, r11, r10");
    a.op(&format!("MOVI r5, {SIZE_WORD:#x}"));
    a.op("LOAD r5, [r5]");
    a.op("BLT  r4, r5, gadget");
    a.op("JMPI r15");
    a.label("gadget");
    a.op("SHL  r7, r4, 3");
    a.op(&format!("ADD  r7, r7, {ARRAY1:#x}"));
    a.op("LOAD r8, [r7]");
    a.op("SHR  r8, r8, r6");
    a.op("AND  r8, r8, 1");
    a.op("BEQ  r8, 0, skip");
    if tlb {
        for p in 0..TSA_TROJAN_PAGES {
            a.op(&format!("LOAD r8, [r14+{}]", p * PAGE + (p % 64) * 64));
        }
    } else {
        for l in 0..TSA_TROJAN_LINES {
            a.op(&format!("LOAD r8, [r14+{}]", l * 64));
        }
    }
    a.label("skip");
    a.op("JMPI r15");

    // array1[1] has bit 0 set for the warm-up pass.
    let mut array1 = [0; ARRAY1_LEN as usize];
    array1[1] = 1;
    let spy_bytes = if tlb { (TSA_WINDOWS as u64 + 2) * SPY_TLB_WINDOW + SPY_TLB_SECOND + PAGE } else { PAGE };
    let data = format!(
        "{}.data {TROJAN:#x} rw\n        .zero {}\n.data {SPY:#x} rw\n        .zero {spy_bytes}\n{}",
        common_data(&array1),
        2 * trojan_bytes,
        if tlb { format!(".data {TOUCH:#x} rw\n        .zero {}\n", (TSA_WINDOWS as u64 + 3) * 8 * PAGE) } else { String::new() }
    );
    format!("{}{data}{}{}", a.text, secret_segment(secret, "rw"), timing_segment(TSA_WINDOWS))
}
