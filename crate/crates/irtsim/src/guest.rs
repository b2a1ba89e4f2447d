//! Bundled guest programs and the scenario builder.
//!
//! Guest sources live under `guest/` in the assembler dialect; the builder
//! prepends an `.equ` parameter header, assembles them together with the
//! mini-kernel, and appends Sv39 page tables built here. All scenarios run
//! the same machine layout:
//!
//! ```text
//! 0x8000_0000  machine-mode boot stub + timer handler
//! 0x8010_0000  kernel text (U=0, RWX)
//! 0x8020_0000  kernel data: task blocks, task list (U=0, RW)
//! 0x8030_0000  protected region, the in-kernel allocation the attack
//!              overwrites (U=0, RW)
//! 0x8040_0000  handling process (U=1, RWX)
//! 0x8050_0000  benchmark task (U=1, RWX)
//! 0x8060_0000  page tables
//! ```
//!
//! Everything is identity-mapped with 4 KiB pages (three-level walks), with
//! A and D preset since there is no hardware A/D update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asm::{assemble, AsmError};
use crate::mem::{MemoryImage, Segment};
use crate::mmu::Pte;
use crate::trojan::{TrojanConfig, TrojanKind};

pub const BOOT_BASE: u64 = 0x8000_0000;
pub const KERNEL_TEXT: u64 = 0x8010_0000;
pub const KERNEL_DATA: u64 = 0x8020_0000;
pub const PROTECTED_BASE: u64 = 0x8030_0000;
pub const USER_BASE: u64 = 0x8040_0000;
pub const BENCH_BASE: u64 = 0x8050_0000;
pub const PT_BASE: u64 = 0x8060_0000;
pub const MMIO_PAGE: u64 = 0x1000_0000;

/// Bytes of the protected region that are mapped.
pub const PROTECTED_MAPPED: u64 = 64 * 1024;

/// Fill value the handling process writes.
pub const FILL_VALUE: u64 = 0xfeed_c0de_ba5e_ba11;
/// Task-list sentinel the scheduler validates.
pub const SENTINEL: u64 = 0x5afe_5afe;

// Exit codes the kernel reports through the exit register.
pub const EXIT_OK: u64 = 42;
pub const EXIT_STORE_FAULT: u64 = 13;
pub const EXIT_PANIC: u64 = 0x77;
pub const EXIT_KERNEL_BUG: u64 = 0x98;
pub const EXIT_MACHINE_BUG: u64 = 0x99;

const BOOT_S: &str = include_str!("../guest/boot.s");
const KERNEL_S: &str = include_str!("../guest/kernel.s");
const HANDLING_S: &str = include_str!("../guest/handling.s");
const BENCHMARK_S: &str = include_str!("../guest/benchmark.s");
const SWEEP_S: &str = include_str!("../guest/sweep.s");

/// The bundled experiment scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Timer-preempted overwrite of the protected region (kernel context
    /// switching).
    KernelCs,
    /// Handling process interleaved with the benchmark task.
    Multitask,
    /// Cold/warm store race against the trigger propagation latency.
    Race,
    /// Plain protected-region overwrite with a quantum too long to preempt.
    Integrity,
    /// Task-list overwrite that panics the scheduler.
    Availability,
    /// Brute-force trigger sweep loop.
    Sweep,
    /// The kernel-CS image run with the trojan disabled.
    Baseline,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::KernelCs => "kernel_cs",
            Scenario::Multitask => "multitask",
            Scenario::Race => "race",
            Scenario::Integrity => "integrity",
            Scenario::Availability => "availability",
            Scenario::Sweep => "sweep",
            Scenario::Baseline => "baseline",
        }
    }

    pub fn parse(name: &str) -> Option<Scenario> {
        Some(match name {
            "kernel_cs" | "kernel-cs" => Scenario::KernelCs,
            "multitask" => Scenario::Multitask,
            "race" => Scenario::Race,
            "integrity" => Scenario::Integrity,
            "availability" => Scenario::Availability,
            "sweep" => Scenario::Sweep,
            "baseline" => Scenario::Baseline,
            _ => return None,
        })
    }
}

/// Scenario parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub scenario: Scenario,
    /// Amount written into the protected region, in KiB. The paper rows
    /// are 0.5, 1, 4, 16 and 32.
    pub kbytes: f64,
    /// Timer cycles per slice.
    pub quantum: u64,
    /// Seed for the slice-jitter generator (multitask interleaving).
    pub seed: u64,
    pub trojan: TrojanConfig,
    /// Comparator widths for the sweep scenario.
    pub sweep_bits: u32,
    pub bench_iters: u64,
}

impl ScenarioParams {
    /// Scenario defaults: trigger kind and quantum per experiment.
    pub fn new(scenario: Scenario) -> Self {
        let trojan = match scenario {
            Scenario::Multitask | Scenario::Availability => TrojanConfig::irt2(),
            Scenario::Baseline => TrojanConfig::disabled(),
            _ => TrojanConfig::irt1(),
        };
        let quantum = match scenario {
            // No preemption wanted: one huge slice.
            Scenario::Race | Scenario::Integrity => 1 << 40,
            _ => 2000,
        };
        ScenarioParams {
            scenario,
            kbytes: 1.0,
            quantum,
            seed: 1,
            trojan,
            sweep_bits: 8,
            bench_iters: 1500,
        }
    }

    pub fn target_bytes(&self) -> u64 {
        (self.kbytes * 1024.0) as u64
    }

    /// Whether kbytes is one of the rows the original tables report.
    pub fn paper_row(&self) -> bool {
        [0.5, 1.0, 4.0, 16.0, 32.0].contains(&self.kbytes)
    }
}

/// What a run of the scenario is expected to produce, checkable from the
/// run summary and a memory digest alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AttackSucceeds,
    StoreFaults,
    KernelPanicMarker,
    Completed,
}

/// Expected postcondition of a scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub verdict: Verdict,
    pub exit_code: u64,
    /// (base address, length, fill value) the protected range must equal.
    pub pattern: Option<(u64, u64, u64)>,
    /// Expected number of suppressed store faults.
    pub suppressed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("kbytes {0} exceeds the mapped protected region ({1} bytes)")]
    TooLarge(u64, u64),
    #[error("kbytes must be a positive multiple of 8 bytes, got {0}")]
    BadSize(f64),
    #[error("sweep width {0} out of range 4..=32")]
    BadSweepBits(u32),
    #[error("invalid trojan config: {0}")]
    Trojan(#[from] crate::trojan::TrojanConfigError),
    #[error("guest assembly failed: {0}")]
    Asm(#[from] AsmError),
}

// ---------------------------------------------------------------------------
// Page tables
// ---------------------------------------------------------------------------

/// Builds an Sv39 page-table forest as a flat byte blob at a fixed base.
pub struct PageTableBuilder {
    base: u64,
    tables: Vec<[u64; 512]>,
}

impl PageTableBuilder {
    pub fn new(base: u64) -> Self {
        PageTableBuilder {
            base,
            tables: vec![[0u64; 512]],
        }
    }

    pub fn root_ppn(&self) -> u64 {
        self.base >> 12
    }

    pub fn satp_value(&self) -> u64 {
        (crate::csr::SATP_MODE_SV39 << 60) | self.root_ppn()
    }

    fn table_pa(&self, index: usize) -> u64 {
        self.base + (index as u64) * 4096
    }

    fn next_table(&mut self, table: usize, slot: usize) -> usize {
        let entry = self.tables[table][slot];
        if Pte(entry).valid() {
            let pa = Pte(entry).ppn() << 12;
            return ((pa - self.base) / 4096) as usize;
        }
        self.tables.push([0u64; 512]);
        let idx = self.tables.len() - 1;
        self.tables[table][slot] = Pte::new(self.table_pa(idx) >> 12, Pte::V).0;
        idx
    }

    /// Installs a 4 KiB leaf for `va -> pa` with the given flag set.
    pub fn map_page(&mut self, va: u64, pa: u64, flags: u64) {
        let vpn2 = ((va >> 30) & 0x1ff) as usize;
        let vpn1 = ((va >> 21) & 0x1ff) as usize;
        let vpn0 = ((va >> 12) & 0x1ff) as usize;
        let l1 = self.next_table(0, vpn2);
        let l0 = self.next_table(l1, vpn1);
        self.tables[l0][vpn0] = Pte::new(pa >> 12, flags).0;
    }

    pub fn map_range(&mut self, va: u64, pa: u64, len: u64, flags: u64) {
        let pages = len.div_ceil(4096);
        for i in 0..pages {
            self.map_page(va + i * 4096, pa + i * 4096, flags);
        }
    }

    pub fn into_segment(self) -> Segment {
        let mut bytes = Vec::with_capacity(self.tables.len() * 4096);
        for table in &self.tables {
            for pte in table {
                bytes.extend_from_slice(&pte.to_le_bytes());
            }
        }
        Segment {
            addr: self.base,
            bytes,
        }
    }
}

fn kernel_page_tables() -> PageTableBuilder {
    let mut pt = PageTableBuilder::new(PT_BASE);
    let rwx = Pte::V | Pte::R | Pte::W | Pte::X | Pte::A | Pte::D;
    let rw = Pte::V | Pte::R | Pte::W | Pte::A | Pte::D;
    let user_rwx = rwx | Pte::U;
    pt.map_range(KERNEL_TEXT, KERNEL_TEXT, 16 * 1024, rwx);
    pt.map_range(KERNEL_DATA, KERNEL_DATA, 16 * 1024, rw);
    pt.map_range(PROTECTED_BASE, PROTECTED_BASE, PROTECTED_MAPPED, rw);
    pt.map_range(USER_BASE, USER_BASE, 16 * 1024, user_rwx);
    pt.map_range(BENCH_BASE, BENCH_BASE, 8 * 1024, user_rwx);
    pt.map_range(MMIO_PAGE, MMIO_PAGE, 4096, rw);
    pt
}

// ---------------------------------------------------------------------------
// Scenario builder
// ---------------------------------------------------------------------------

struct EquHeader(String);

impl EquHeader {
    fn new() -> Self {
        EquHeader(String::new())
    }

    fn set(&mut self, name: &str, value: u64) -> &mut Self {
        self.0.push_str(&format!(".equ {name}, {value:#x}\n"));
        self
    }
}

/// Builds the memory image and expected outcome for a scenario.
///
/// The baseline scenario builds the kernel-CS image byte for byte; only the
/// runner's trojan configuration differs.
pub fn build_scenario(params: &ScenarioParams) -> Result<(MemoryImage, ExpectedOutcome), BuildError> {
    params.trojan.validate()?;
    if params.scenario == Scenario::Sweep {
        let image = build_sweep_loop(params.sweep_bits)?;
        let expected = ExpectedOutcome {
            verdict: Verdict::Completed,
            exit_code: 0,
            pattern: None,
            suppressed: Some(0),
        };
        return Ok((image, expected));
    }

    let scenario = params.scenario;
    let bytes = match scenario {
        // The availability overwrite clobbers the sentinels, nothing more.
        Scenario::Availability => 64,
        _ => {
            let b = params.target_bytes();
            if b == 0 || b % 8 != 0 || (b as f64) != params.kbytes * 1024.0 {
                return Err(BuildError::BadSize(params.kbytes));
            }
            if b > PROTECTED_MAPPED {
                return Err(BuildError::TooLarge(b, PROTECTED_MAPPED));
            }
            b
        }
    };

    let ntasks: u64 = match scenario {
        Scenario::Multitask => 2,
        _ => 1,
    };
    let pt = kernel_page_tables();

    let mut header = EquHeader::new();
    header
        .set("QUANTUM", params.quantum)
        .set("SEED", params.seed | 1)
        .set(
            "JITTER_MASK",
            if scenario == Scenario::Multitask {
                0x1ff
            } else {
                0
            },
        )
        .set("SATP_VALUE", pt.satp_value())
        .set("NTASKS", ntasks)
        .set("DONE_MASK", (1 << ntasks) - 1)
        .set("SENTINEL", SENTINEL)
        .set(
            "RACE_MODE",
            if scenario == Scenario::Race { 1 } else { 0 },
        )
        .set(
            "RACE_RESTORE",
            if scenario == Scenario::Race { 1 } else { 0 },
        )
        .set(
            "RACE_USER",
            if scenario == Scenario::Race { 1 } else { 0 },
        )
        .set(
            "ARM_IRT2",
            if params.trojan.kind == TrojanKind::Irt2 {
                1
            } else {
                0
            },
        )
        .set("ACT_HI", params.trojan.activation.0)
        .set("ACT_LO", params.trojan.activation.1)
        .set("DEACT_HI", params.trojan.deactivation.0)
        .set("DEACT_LO", params.trojan.deactivation.1)
        .set("NWORDS", bytes / 8)
        .set("FILL", FILL_VALUE)
        .set("BENCH_ITERS", params.bench_iters)
        .set(
            "DONE_CODE",
            if scenario == Scenario::Availability {
                0
            } else {
                1
            },
        );

    let target_va = match scenario {
        Scenario::Availability => 0, // patched below from the symbol table
        _ => PROTECTED_BASE,
    };

    // The availability target is a kernel label, so assemble in two steps:
    // first resolve symbols with a placeholder, then inject the real VA.
    let mut source = String::new();
    source.push_str(&header.0);
    source.push_str(&format!(".equ TARGET_VA, {target_va:#x}\n"));
    source.push_str(BOOT_S);
    source.push_str(KERNEL_S);
    source.push_str(HANDLING_S);
    source.push_str(BENCHMARK_S);
    let mut image = assemble(&source)?;
    if scenario == Scenario::Availability {
        let target = image.symbol("attack_target").expect("kernel symbol");
        let mut source = String::new();
        source.push_str(&header.0);
        source.push_str(&format!(".equ TARGET_VA, {target:#x}\n"));
        source.push_str(BOOT_S);
        source.push_str(KERNEL_S);
        source.push_str(HANDLING_S);
        source.push_str(BENCHMARK_S);
        image = assemble(&source)?;
    }

    image.segments.push(pt.into_segment());
    image
        .normalize()
        .expect("page tables must not overlap guest code");

    let expected = match scenario {
        Scenario::Baseline => ExpectedOutcome {
            verdict: Verdict::StoreFaults,
            exit_code: EXIT_STORE_FAULT,
            pattern: None,
            suppressed: Some(0),
        },
        Scenario::Availability => ExpectedOutcome {
            verdict: Verdict::KernelPanicMarker,
            exit_code: EXIT_PANIC,
            pattern: Some((
                image.symbol("attack_target").expect("kernel symbol"),
                bytes,
                FILL_VALUE,
            )),
            suppressed: Some(bytes / 8),
        },
        Scenario::Race => ExpectedOutcome {
            verdict: Verdict::AttackSucceeds,
            exit_code: EXIT_OK,
            // Only the cold store lands; the warm one faults by design.
            pattern: Some((PROTECTED_BASE, 8, FILL_VALUE)),
            suppressed: Some(1),
        },
        _ => ExpectedOutcome {
            verdict: Verdict::AttackSucceeds,
            exit_code: EXIT_OK,
            pattern: Some((PROTECTED_BASE, bytes, FILL_VALUE)),
            suppressed: Some(bytes / 8),
        },
    };
    Ok((image, expected))
}

/// Builds the sweep image: a user-level loop enumerating all `2^bits`
/// values of the host register pair, halting at wraparound.
pub fn build_sweep_loop(bits: u32) -> Result<MemoryImage, BuildError> {
    if !(4..=32).contains(&bits) {
        return Err(BuildError::BadSweepBits(bits));
    }
    let mask = (1u64 << bits) - 1;
    let mut source = String::new();
    source.push_str(&format!(".equ SWEEP_MASK, {mask:#x}\n"));
    source.push_str(SWEEP_S);
    Ok(assemble(&source)?)
}

/// Closed-form executed-instruction count for a sweep image, derived from
/// the emitted layout: everything before the loop runs once, the 5-wide
/// loop body runs `2^bits` times, and the epilogue runs once.
pub fn sweep_expected_instret(image: &MemoryImage, bits: u32) -> u64 {
    let start = image.symbol("_start").expect("sweep start");
    let loop_start = image.symbol("sweep_loop").expect("sweep loop");
    let idle = image.symbol("sweep_idle").expect("sweep idle");
    let prologue = (loop_start - start) / 4;
    let loop_len = 5u64;
    let epilogue = (idle - loop_start) / 4 - loop_len;
    prologue + loop_len * (1u64 << bits) + epilogue
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Mode, Simulation, SimOptions};
    use crate::mmu::{translate, Access, TranslationRequest};

    #[test]
    fn all_scenarios_assemble() {
        for scenario in [
            Scenario::KernelCs,
            Scenario::Multitask,
            Scenario::Race,
            Scenario::Integrity,
            Scenario::Availability,
            Scenario::Baseline,
            Scenario::Sweep,
        ] {
            let params = ScenarioParams::new(scenario);
            let (image, _) = build_scenario(&params).unwrap();
            assert!(!image.segments.is_empty(), "{scenario:?}");
        }
    }

    #[test]
    fn baseline_image_matches_kernel_cs() {
        let mut a = ScenarioParams::new(Scenario::KernelCs);
        a.kbytes = 0.5;
        let mut b = ScenarioParams::new(Scenario::Baseline);
        b.kbytes = 0.5;
        let (ia, _) = build_scenario(&a).unwrap();
        let (ib, _) = build_scenario(&b).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn oversized_kbytes_rejected() {
        let mut params = ScenarioParams::new(Scenario::KernelCs);
        params.kbytes = 128.0;
        assert!(matches!(
            build_scenario(&params),
            Err(BuildError::TooLarge(..))
        ));
    }

    #[test]
    fn page_tables_translate_the_layout() {
        let params = ScenarioParams::new(Scenario::KernelCs);
        let (image, _) = build_scenario(&params).unwrap();
        let mut sim = Simulation::new(&image, None, &SimOptions::default());
        sim.machine.csr.satp = kernel_page_tables().satp_value();

        // Protected region: S-mode store ok, U-mode store faults.
        let mut req = TranslationRequest {
            va: PROTECTED_BASE + 0x18,
            access: Access::Store,
            mode: Mode::Supervisor,
            sum: false,
        };
        let res = translate(req, &mut sim.machine, &mut sim.trojan).unwrap();
        assert_eq!(res.outcome, Ok(PROTECTED_BASE + 0x18));
        assert_eq!(res.walk.len(), 3);

        req.mode = Mode::User;
        let res = translate(req, &mut sim.machine, &mut sim.trojan).unwrap();
        assert!(res.outcome.is_err());

        // User code is fetchable from U-mode.
        let ureq = TranslationRequest {
            va: USER_BASE,
            access: Access::Fetch,
            mode: Mode::User,
            sum: false,
        };
        let res = translate(ureq, &mut sim.machine, &mut sim.trojan).unwrap();
        assert_eq!(res.outcome, Ok(USER_BASE));
    }

    #[test]
    fn sweep_counts_double_per_bit() {
        let a = build_sweep_loop(8).unwrap();
        let b = build_sweep_loop(9).unwrap();
        let ca = sweep_expected_instret(&a, 8);
        let cb = sweep_expected_instret(&b, 9);
        // Same fixed overhead, doubled loop count.
        let overhead = ca - 5 * (1 << 8);
        assert_eq!(cb, overhead + 5 * (1 << 9));
    }

    #[test]
    fn sweep_rejects_desk_scale_violations() {
        assert!(build_sweep_loop(3).is_err());
        assert!(build_sweep_loop(33).is_err());
        assert!(build_sweep_loop(16).is_ok());
    }
}
