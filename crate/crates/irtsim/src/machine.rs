//! Deterministic fetch-decode-execute engine for the RV64 subset with
//! M/S/U privilege modes, synchronous exceptions, a timer interrupt and an
//! additive cycle model.
//!
//! Cycle accounting: 1 cycle per instruction, plus `mem_access_cycles` per
//! data access and per PTE read during a walk, plus `trap_entry_cost` per
//! trap entry and per `mret`/`sret`. The trojan runtime is ticked once per
//! elapsed cycle, including the stall cycles of multi-cycle instructions,
//! with architectural state held constant during the stall.

use serde::{Deserialize, Serialize};

use crate::csr::{
    CsrFile, IRQ_M_TIMER, IRQ_S_TIMER, MSTATUS_MIE, MSTATUS_MPIE, MSTATUS_MPP_MASK, MSTATUS_SIE,
    MSTATUS_SPIE, MSTATUS_SPP,
};
use crate::isa::{self, Instruction, Op};
use crate::mem::{MemoryImage, PhysicalMemory, StoreEffect, RAM_SIZE_DEFAULT};
use crate::mmu::{self, Access, Tlb, TranslationRequest, TranslationResult};
use crate::trojan::{TriggerTrace, TrojanConfig, TrojanRuntime};

/// Privilege mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    User,
    Supervisor,
    Machine,
}

impl Mode {
    /// Privileged-spec encoding (U=0, S=1, M=3).
    pub fn encode(self) -> u8 {
        match self {
            Mode::User => 0,
            Mode::Supervisor => 1,
            Mode::Machine => 3,
        }
    }
}

/// Trap causes, numbered exactly as the privileged spec does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrapCause {
    InstructionAddressMisaligned,
    InstructionAccessFault,
    IllegalInstruction,
    Breakpoint,
    LoadAccessFault,
    StoreAccessFault,
    EcallFromU,
    EcallFromS,
    EcallFromM,
    InstructionPageFault,
    LoadPageFault,
    StorePageFault,
    SupervisorTimerInterrupt,
    MachineTimerInterrupt,
}

impl TrapCause {
    pub fn code(self) -> u64 {
        match self {
            TrapCause::InstructionAddressMisaligned => 0,
            TrapCause::InstructionAccessFault => 1,
            TrapCause::IllegalInstruction => 2,
            TrapCause::Breakpoint => 3,
            TrapCause::LoadAccessFault => 5,
            TrapCause::StoreAccessFault => 7,
            TrapCause::EcallFromU => 8,
            TrapCause::EcallFromS => 9,
            TrapCause::EcallFromM => 11,
            TrapCause::InstructionPageFault => 12,
            TrapCause::LoadPageFault => 13,
            TrapCause::StorePageFault => 15,
            TrapCause::SupervisorTimerInterrupt => 5,
            TrapCause::MachineTimerInterrupt => 7,
        }
    }

    pub fn is_interrupt(self) -> bool {
        matches!(
            self,
            TrapCause::SupervisorTimerInterrupt | TrapCause::MachineTimerInterrupt
        )
    }

    /// xcause register value (interrupt bit folded in).
    pub fn value(self) -> u64 {
        let int = if self.is_interrupt() { 1u64 << 63 } else { 0 };
        int | self.code()
    }
}

/// Cycle-model knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    /// Cycles per physical data access and per PTE read.
    pub mem_access_cycles: u64,
    /// Cycles per trap entry and per xRET.
    pub trap_entry_cost: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            mem_access_cycles: 4,
            trap_entry_cost: 2,
        }
    }
}

/// Per-mode counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounters {
    pub user: u64,
    pub supervisor: u64,
    pub machine: u64,
}

impl ModeCounters {
    pub fn bump(&mut self, mode: Mode, n: u64) {
        match mode {
            Mode::User => self.user += n,
            Mode::Supervisor => self.supervisor += n,
            Mode::Machine => self.machine += n,
        }
    }

    pub fn get(&self, mode: Mode) -> u64 {
        match mode {
            Mode::User => self.user,
            Mode::Supervisor => self.supervisor,
            Mode::Machine => self.machine,
        }
    }

    pub fn total(&self) -> u64 {
        self.user + self.supervisor + self.machine
    }
}

/// A mode change, stamped with the cycle it happened at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeTransition {
    pub cycle: u64,
    pub mode: Mode,
}

/// A byte captured from the putchar MMIO register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputByte {
    pub cycle: u64,
    pub byte: u8,
}

/// Probe record for a store translated inside the configured probe range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreProbe {
    /// Cycle count at the permission check.
    pub cycle: u64,
    pub va: u64,
    pub ok: bool,
    /// Fault code when `ok` is false.
    pub fault_code: Option<u64>,
    pub tlb_hit: bool,
    pub walk_cycles: u64,
    pub delivered_at_start: bool,
    pub delivered_at_check: bool,
    pub overridden: bool,
}

/// Signals that the run's cycle budget was exhausted mid-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stopped;

/// Architectural CPU state plus physical memory and bookkeeping.
#[derive(Debug)]
pub struct MachineState {
    pub pc: u64,
    gprs: [u64; 32],
    pub mode: Mode,
    pub csr: CsrFile,
    pub cycles: u64,
    pub instret: u64,
    pub mem: PhysicalMemory,
    pub tlb: Tlb,
    pub timing: Timing,
    pub mode_entries: ModeCounters,
    pub mode_cycles: ModeCounters,
    pub mode_transitions: Vec<ModeTransition>,
    pub output: Vec<OutputByte>,
    pub halted: Option<u64>,
    pub probe_range: Option<(u64, u64)>,
    pub probes: Vec<StoreProbe>,
    pub trace_mmu: bool,
    pub mmu_trace: Vec<String>,
    cycle_budget: Option<u64>,
}

impl MachineState {
    pub fn new(mem_size: u64) -> Self {
        MachineState {
            pc: 0,
            gprs: [0; 32],
            mode: Mode::Machine,
            csr: CsrFile::new(),
            cycles: 0,
            instret: 0,
            mem: PhysicalMemory::new(mem_size),
            tlb: Tlb::default(),
            timing: Timing::default(),
            mode_entries: ModeCounters::default(),
            mode_cycles: ModeCounters::default(),
            mode_transitions: Vec::new(),
            output: Vec::new(),
            halted: None,
            probe_range: None,
            probes: Vec::new(),
            trace_mmu: false,
            mmu_trace: Vec::new(),
            cycle_budget: None,
        }
    }

    pub fn gpr(&self, r: u8) -> u64 {
        self.gprs[r as usize]
    }

    pub fn set_gpr(&mut self, r: u8, v: u64) {
        if r != 0 {
            self.gprs[r as usize] = v;
        }
    }

    pub fn gprs(&self) -> &[u64; 32] {
        &self.gprs
    }

    fn set_mode(&mut self, mode: Mode) {
        if mode != self.mode {
            self.mode = mode;
            self.mode_transitions.push(ModeTransition {
                cycle: self.cycles,
                mode,
            });
        }
    }

    /// FNV-1a digest over registers, pc, mode and the architectural CSRs.
    pub fn reg_digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        for r in self.gprs {
            mix(r);
        }
        mix(self.pc);
        mix(self.mode.encode() as u64);
        let c = &self.csr;
        for v in [
            c.mstatus, c.mtvec, c.mepc, c.mcause, c.mtval, c.medeleg, c.mideleg, c.mie, c.mip,
            c.satp, c.stvec, c.sepc, c.scause, c.stval, c.sscratch, c.mscratch,
        ] {
            mix(v);
        }
        h
    }
}

/// Advances the clock by `n` cycles, ticking the trojan once per cycle.
///
/// Architectural state is constant across the ticks, which is what lets a
/// pending trigger mature during a page-table walk. Stops short when the
/// run's cycle budget is reached.
pub(crate) fn advance(
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
    n: u64,
) -> Result<(), Stopped> {
    for _ in 0..n {
        if let Some(budget) = mach.cycle_budget {
            if mach.cycles >= budget {
                return Err(Stopped);
            }
        }
        mach.cycles += 1;
        mach.csr.mtime = mach.csr.mtime.wrapping_add(1);
        mach.mode_cycles.bump(mach.mode, 1);
        if let Some(t) = trojan.as_mut() {
            let raw = t.sample_raw(&mach.gprs);
            t.tick(raw, mach.cycles);
        }
    }
    Ok(())
}

/// Trap entry: picks the target mode from the delegation registers, writes
/// the xepc/xcause/xtval set, switches mode and jumps to the vector.
pub(crate) fn raise_trap(
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
    cause: TrapCause,
    tval: u64,
) -> Result<(), Stopped> {
    let deleg = if cause.is_interrupt() {
        mach.csr.mideleg
    } else {
        mach.csr.medeleg
    };
    let to_supervisor = mach.mode != Mode::Machine && (deleg >> cause.code()) & 1 == 1;
    if to_supervisor {
        mach.csr.sepc = mach.pc;
        mach.csr.scause = cause.value();
        mach.csr.stval = tval;
        let sie = mach.csr.mstatus & MSTATUS_SIE != 0;
        mach.csr.mstatus &= !(MSTATUS_SPIE | MSTATUS_SIE | MSTATUS_SPP);
        if sie {
            mach.csr.mstatus |= MSTATUS_SPIE;
        }
        if mach.mode == Mode::Supervisor {
            mach.csr.mstatus |= MSTATUS_SPP;
        }
        mach.set_mode(Mode::Supervisor);
        mach.mode_entries.bump(Mode::Supervisor, 1);
        mach.pc = mach.csr.stvec;
    } else {
        mach.csr.mepc = mach.pc;
        mach.csr.mcause = cause.value();
        mach.csr.mtval = tval;
        let mie = mach.csr.mstatus & MSTATUS_MIE != 0;
        mach.csr.mstatus &= !(MSTATUS_MPIE | MSTATUS_MIE);
        if mie {
            mach.csr.mstatus |= MSTATUS_MPIE;
        }
        mach.csr.set_mpp(mach.mode);
        mach.set_mode(Mode::Machine);
        mach.mode_entries.bump(Mode::Machine, 1);
        mach.pc = mach.csr.mtvec;
    }
    advance(mach, trojan, mach.timing.trap_entry_cost)
}

fn pending_interrupt(mach: &MachineState) -> Option<TrapCause> {
    let pending = mach.csr.mip_effective() & mach.csr.mie;
    // Machine timer has priority over supervisor timer.
    for (bit, cause) in [
        (IRQ_M_TIMER, TrapCause::MachineTimerInterrupt),
        (IRQ_S_TIMER, TrapCause::SupervisorTimerInterrupt),
    ] {
        if pending & (1 << bit) == 0 {
            continue;
        }
        let delegated = (mach.csr.mideleg >> bit) & 1 == 1;
        let take = if delegated {
            match mach.mode {
                Mode::User => true,
                Mode::Supervisor => mach.csr.mstatus & MSTATUS_SIE != 0,
                Mode::Machine => false,
            }
        } else {
            match mach.mode {
                Mode::Machine => mach.csr.mstatus & MSTATUS_MIE != 0,
                _ => true,
            }
        };
        if take {
            return Some(cause);
        }
    }
    None
}

/// What a single step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Executed,
    Trapped(TrapCause),
    InterruptTaken(TrapCause),
    Halted(u64),
    CycleLimit,
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Guest stored to the exit MMIO register.
    Exit,
    /// pc reached the configured sentinel address.
    Sentinel,
    /// Cycle budget exhausted without a completion marker.
    CycleLimit,
}

/// Stop condition for [`Simulation::run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCondition {
    pub max_cycles: u64,
    pub pc_sentinel: Option<u64>,
}

impl StopCondition {
    pub fn max_cycles(n: u64) -> Self {
        StopCondition {
            max_cycles: n,
            pc_sentinel: None,
        }
    }
}

/// Trojan side of a run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrojanReport {
    pub config: TrojanConfig,
    pub stats: crate::trojan::PayloadStats,
}

/// Everything a finished run reports. Serialization is deterministic:
/// identical image, trojan config and seed give identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub stop: StopReason,
    pub exit_code: Option<u64>,
    pub total_cycles: u64,
    pub instret: u64,
    pub mode_entries: ModeCounters,
    pub mode_cycles: ModeCounters,
    pub mem_digest: u64,
    pub reg_digest: u64,
    pub trojan: Option<TrojanReport>,
    pub mode_transitions: Vec<ModeTransition>,
    pub output: Vec<OutputByte>,
    pub probes: Vec<StoreProbe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger_trace: Option<TriggerTrace>,
}

impl RunSummary {
    pub fn output_string(&self) -> String {
        self.output.iter().map(|o| o.byte as char).collect()
    }
}

/// Extra knobs for building a [`Simulation`].
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub mem_size: u64,
    pub timing: Timing,
    pub tlb_enabled: bool,
    pub trace_trojan: bool,
    pub trace_mmu: bool,
    pub probe_range: Option<(u64, u64)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            mem_size: RAM_SIZE_DEFAULT,
            timing: Timing::default(),
            tlb_enabled: true,
            trace_trojan: false,
            trace_mmu: false,
            probe_range: None,
        }
    }
}

/// A machine plus (optionally) its trojan runtime: one single-threaded unit
/// of execution. `trojan: None` builds the layer out entirely, which the
/// payload-transparency tests compare against `TrojanKind::Disabled`.
#[derive(Debug)]
pub struct Simulation {
    pub machine: MachineState,
    pub trojan: Option<TrojanRuntime>,
}

impl Simulation {
    pub fn new(image: &MemoryImage, trojan: Option<TrojanConfig>, opts: &SimOptions) -> Self {
        let mut machine = MachineState::new(opts.mem_size);
        machine.timing = opts.timing;
        machine.tlb.enabled = opts.tlb_enabled;
        machine.trace_mmu = opts.trace_mmu;
        machine.probe_range = opts.probe_range;
        machine
            .mem
            .load_image(image)
            .expect("image must fit in RAM");
        machine.pc = image.entry;
        let trojan = trojan.map(|cfg| {
            if opts.trace_trojan {
                TrojanRuntime::with_trace(cfg)
            } else {
                TrojanRuntime::new(cfg)
            }
        });
        Simulation { machine, trojan }
    }

    /// Executes one step: a pending interrupt, or one instruction.
    pub fn step(&mut self) -> StepOutcome {
        match step_inner(&mut self.machine, &mut self.trojan) {
            Ok(outcome) => outcome,
            Err(Stopped) => StepOutcome::CycleLimit,
        }
    }

    /// Runs until exit, sentinel or the cycle budget, then reports.
    pub fn run(&mut self, stop: StopCondition) -> RunSummary {
        self.machine.cycle_budget = Some(stop.max_cycles);
        let reason = loop {
            match self.step() {
                StepOutcome::Halted(_) => break StopReason::Exit,
                StepOutcome::CycleLimit => break StopReason::CycleLimit,
                _ => {}
            }
            if stop.pc_sentinel == Some(self.machine.pc) {
                break StopReason::Sentinel;
            }
        };
        self.summarize(reason)
    }

    fn summarize(&mut self, stop: StopReason) -> RunSummary {
        let m = &self.machine;
        RunSummary {
            stop,
            exit_code: m.halted,
            total_cycles: m.cycles,
            instret: m.instret,
            mode_entries: m.mode_entries,
            mode_cycles: m.mode_cycles,
            mem_digest: m.mem.digest(),
            reg_digest: m.reg_digest(),
            trojan: self.trojan.as_ref().map(|t| TrojanReport {
                config: t.config().clone(),
                stats: t.stats(),
            }),
            mode_transitions: m.mode_transitions.clone(),
            output: m.output.clone(),
            probes: m.probes.clone(),
            trigger_trace: self.trojan.as_mut().and_then(|t| t.take_trace()),
        }
    }
}

enum Exec {
    Done,
    Fault(TrapCause, u64),
}

fn log_walk(mach: &mut MachineState, res: &TranslationResult) {
    if mach.trace_mmu && !res.walk.is_empty() {
        for step in &res.walk {
            mach.mmu_trace.push(format!(
                "cycle={} level={} addr={:#x} pte={:#018x}",
                mach.cycles, step.level, step.pte_addr, step.pte
            ));
        }
    }
}

fn translate_for(
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
    va: u64,
    access: Access,
) -> Result<TranslationResult, Stopped> {
    let req = TranslationRequest {
        va,
        access,
        mode: mach.mode,
        sum: mach.csr.sum(),
    };
    let res = mmu::translate(req, mach, trojan)?;
    log_walk(mach, &res);
    Ok(res)
}

fn step_inner(
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
) -> Result<StepOutcome, Stopped> {
    if let Some(code) = mach.halted {
        return Ok(StepOutcome::Halted(code));
    }

    if let Some(cause) = pending_interrupt(mach) {
        raise_trap(mach, trojan, cause, 0)?;
        return Ok(StepOutcome::InterruptTaken(cause));
    }

    let pc = mach.pc;
    let mut outcome = StepOutcome::Executed;

    if pc & 0b11 != 0 {
        raise_trap(mach, trojan, TrapCause::InstructionAddressMisaligned, pc)?;
        advance(mach, trojan, 1)?;
        return Ok(StepOutcome::Trapped(TrapCause::InstructionAddressMisaligned));
    }

    // Fetch through the MMU.
    let fetch = translate_for(mach, trojan, pc, Access::Fetch)?;
    let word = match fetch.outcome {
        Ok(pa) => match mach.mem.read(pa, 4) {
            Some(w) if mach.mem.in_ram(pa, 4) => w as u32,
            _ => {
                raise_trap(mach, trojan, TrapCause::InstructionAccessFault, pc)?;
                advance(mach, trojan, 1)?;
                return Ok(StepOutcome::Trapped(TrapCause::InstructionAccessFault));
            }
        },
        Err(cause) => {
            raise_trap(mach, trojan, cause, pc)?;
            advance(mach, trojan, 1)?;
            return Ok(StepOutcome::Trapped(cause));
        }
    };

    match isa::decode(word) {
        Err(_) => {
            raise_trap(mach, trojan, TrapCause::IllegalInstruction, word as u64)?;
            outcome = StepOutcome::Trapped(TrapCause::IllegalInstruction);
        }
        Ok(inst) => match execute(mach, trojan, &inst, pc)? {
            Exec::Done => {
                mach.instret += 1;
            }
            Exec::Fault(cause, tval) => {
                raise_trap(mach, trojan, cause, tval)?;
                outcome = StepOutcome::Trapped(cause);
            }
        },
    }

    // Base cycle of the instruction; the tick samples post-execute state.
    advance(mach, trojan, 1)?;

    if let Some(code) = mach.halted {
        return Ok(StepOutcome::Halted(code));
    }
    Ok(outcome)
}

fn load_width(op: Op) -> (u64, bool) {
    match op {
        Op::Lb => (1, true),
        Op::Lh => (2, true),
        Op::Lw => (4, true),
        Op::Ld => (8, true),
        Op::Lbu => (1, false),
        Op::Lhu => (2, false),
        Op::Lwu => (4, false),
        _ => unreachable!(),
    }
}

fn sign_extend(value: u64, width: u64) -> u64 {
    let shift = 64 - width * 8;
    (((value << shift) as i64) >> shift) as u64
}

fn execute(
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
    inst: &Instruction,
    pc: u64,
) -> Result<Exec, Stopped> {
    use Op::*;
    let rs1 = mach.gpr(inst.rs1);
    let rs2 = mach.gpr(inst.rs2);
    let imm = inst.imm;
    let mut next_pc = pc.wrapping_add(4);

    let jump = |target: u64, next_pc: &mut u64| -> Option<Exec> {
        if target & 0b11 != 0 {
            return Some(Exec::Fault(
                TrapCause::InstructionAddressMisaligned,
                target,
            ));
        }
        *next_pc = target;
        None
    };

    match inst.op {
        Lui => mach.set_gpr(inst.rd, (imm << 12) as u64),
        Auipc => mach.set_gpr(inst.rd, pc.wrapping_add((imm << 12) as u64)),
        Jal => {
            let target = pc.wrapping_add(imm as u64);
            if let Some(fault) = jump(target, &mut next_pc) {
                return Ok(fault);
            }
            mach.set_gpr(inst.rd, pc.wrapping_add(4));
        }
        Jalr => {
            let target = rs1.wrapping_add(imm as u64) & !1;
            if let Some(fault) = jump(target, &mut next_pc) {
                return Ok(fault);
            }
            mach.set_gpr(inst.rd, pc.wrapping_add(4));
        }
        Beq | Bne | Blt | Bge | Bltu | Bgeu => {
            let taken = match inst.op {
                Beq => rs1 == rs2,
                Bne => rs1 != rs2,
                Blt => (rs1 as i64) < (rs2 as i64),
                Bge => (rs1 as i64) >= (rs2 as i64),
                Bltu => rs1 < rs2,
                Bgeu => rs1 >= rs2,
                _ => unreachable!(),
            };
            if taken {
                let target = pc.wrapping_add(imm as u64);
                if let Some(fault) = jump(target, &mut next_pc) {
                    return Ok(fault);
                }
            }
        }
        Lb | Lh | Lw | Ld | Lbu | Lhu | Lwu => {
            let va = rs1.wrapping_add(imm as u64);
            let res = translate_for(mach, trojan, va, Access::Load)?;
            let pa = match res.outcome {
                Ok(pa) => pa,
                Err(cause) => return Ok(Exec::Fault(cause, va)),
            };
            advance(mach, trojan, mach.timing.mem_access_cycles)?;
            let (width, signed) = load_width(inst.op);
            let value = match mach.mem.read(pa, width) {
                Some(v) => v,
                None => return Ok(Exec::Fault(TrapCause::LoadAccessFault, va)),
            };
            let value = if signed {
                sign_extend(value, width)
            } else {
                value
            };
            mach.set_gpr(inst.rd, value);
        }
        Sb | Sh | Sw | Sd => {
            let va = rs1.wrapping_add(imm as u64);
            let res = translate_for(mach, trojan, va, Access::Store)?;
            record_probe(mach, va, &res);
            let pa = match res.outcome {
                Ok(pa) => pa,
                Err(cause) => return Ok(Exec::Fault(cause, va)),
            };
            advance(mach, trojan, mach.timing.mem_access_cycles)?;
            let width = match inst.op {
                Sb => 1,
                Sh => 2,
                Sw => 4,
                Sd => 8,
                _ => unreachable!(),
            };
            match mach.mem.write(pa, width, rs2) {
                Some(StoreEffect::None) => {}
                Some(StoreEffect::Exit(code)) => mach.halted = Some(code),
                Some(StoreEffect::PutChar(b)) => {
                    let cycle = mach.cycles;
                    mach.output.push(OutputByte { cycle, byte: b });
                }
                None => return Ok(Exec::Fault(TrapCause::StoreAccessFault, va)),
            }
        }
        Addi => mach.set_gpr(inst.rd, rs1.wrapping_add(imm as u64)),
        Slti => mach.set_gpr(inst.rd, ((rs1 as i64) < imm) as u64),
        Sltiu => mach.set_gpr(inst.rd, (rs1 < imm as u64) as u64),
        Xori => mach.set_gpr(inst.rd, rs1 ^ imm as u64),
        Ori => mach.set_gpr(inst.rd, rs1 | imm as u64),
        Andi => mach.set_gpr(inst.rd, rs1 & imm as u64),
        Slli => mach.set_gpr(inst.rd, rs1 << (imm & 0x3f)),
        Srli => mach.set_gpr(inst.rd, rs1 >> (imm & 0x3f)),
        Srai => mach.set_gpr(inst.rd, ((rs1 as i64) >> (imm & 0x3f)) as u64),
        Add => {
            // The modeled adder port: IRT-2 watches these operands.
            if let Some(t) = trojan.as_mut() {
                t.observe_add(rs1, rs2, mach.cycles);
            }
            mach.set_gpr(inst.rd, rs1.wrapping_add(rs2));
        }
        Sub => mach.set_gpr(inst.rd, rs1.wrapping_sub(rs2)),
        Sll => mach.set_gpr(inst.rd, rs1 << (rs2 & 0x3f)),
        Slt => mach.set_gpr(inst.rd, ((rs1 as i64) < (rs2 as i64)) as u64),
        Sltu => mach.set_gpr(inst.rd, (rs1 < rs2) as u64),
        Xor => mach.set_gpr(inst.rd, rs1 ^ rs2),
        Srl => mach.set_gpr(inst.rd, rs1 >> (rs2 & 0x3f)),
        Sra => mach.set_gpr(inst.rd, ((rs1 as i64) >> (rs2 & 0x3f)) as u64),
        Or => mach.set_gpr(inst.rd, rs1 | rs2),
        And => mach.set_gpr(inst.rd, rs1 & rs2),
        Addiw => mach.set_gpr(inst.rd, (rs1.wrapping_add(imm as u64) as i32) as u64),
        Slliw => mach.set_gpr(inst.rd, (((rs1 as u32) << (imm & 0x1f)) as i32) as u64),
        Srliw => mach.set_gpr(inst.rd, (((rs1 as u32) >> (imm & 0x1f)) as i32) as u64),
        Sraiw => mach.set_gpr(inst.rd, ((rs1 as i32) >> (imm & 0x1f)) as u64),
        Addw => mach.set_gpr(inst.rd, (rs1.wrapping_add(rs2) as i32) as u64),
        Subw => mach.set_gpr(inst.rd, (rs1.wrapping_sub(rs2) as i32) as u64),
        Sllw => mach.set_gpr(inst.rd, (((rs1 as u32) << (rs2 & 0x1f)) as i32) as u64),
        Srlw => mach.set_gpr(inst.rd, (((rs1 as u32) >> (rs2 & 0x1f)) as i32) as u64),
        Sraw => mach.set_gpr(inst.rd, ((rs1 as i32) >> (rs2 & 0x1f)) as u64),
        Fence | Wfi => {}
        Ecall => {
            let cause = match mach.mode {
                Mode::User => TrapCause::EcallFromU,
                Mode::Supervisor => TrapCause::EcallFromS,
                Mode::Machine => TrapCause::EcallFromM,
            };
            return Ok(Exec::Fault(cause, 0));
        }
        Ebreak => return Ok(Exec::Fault(TrapCause::Breakpoint, pc)),
        Mret => {
            if mach.mode != Mode::Machine {
                return Ok(Exec::Fault(TrapCause::IllegalInstruction, inst.raw as u64));
            }
            advance(mach, trojan, mach.timing.trap_entry_cost)?;
            let target_mode = mach.csr.mpp();
            let mpie = mach.csr.mstatus & MSTATUS_MPIE != 0;
            mach.csr.mstatus &= !(MSTATUS_MIE | MSTATUS_MPP_MASK);
            mach.csr.mstatus |= MSTATUS_MPIE;
            if mpie {
                mach.csr.mstatus |= MSTATUS_MIE;
            }
            mach.set_mode(target_mode);
            mach.mode_entries.bump(target_mode, 1);
            next_pc = mach.csr.mepc;
        }
        Sret => {
            if mach.mode == Mode::User {
                return Ok(Exec::Fault(TrapCause::IllegalInstruction, inst.raw as u64));
            }
            advance(mach, trojan, mach.timing.trap_entry_cost)?;
            let target_mode = mach.csr.spp();
            let spie = mach.csr.mstatus & MSTATUS_SPIE != 0;
            mach.csr.mstatus &= !(MSTATUS_SIE | MSTATUS_SPP);
            mach.csr.mstatus |= MSTATUS_SPIE;
            if spie {
                mach.csr.mstatus |= MSTATUS_SIE;
            }
            mach.set_mode(target_mode);
            mach.mode_entries.bump(target_mode, 1);
            next_pc = mach.csr.sepc;
        }
        SfenceVma => {
            if mach.mode == Mode::User {
                return Ok(Exec::Fault(TrapCause::IllegalInstruction, inst.raw as u64));
            }
            mach.tlb.flush();
        }
        Csrrw | Csrrs | Csrrc | Csrrwi | Csrrsi | Csrrci => {
            let addr = imm as u16;
            let src = match inst.op {
                Csrrwi | Csrrsi | Csrrci => inst.rs1 as u64,
                _ => rs1,
            };
            let old = match mach.csr.read(addr, mach.mode, mach.cycles) {
                Ok(v) => v,
                Err(_) => {
                    return Ok(Exec::Fault(TrapCause::IllegalInstruction, inst.raw as u64))
                }
            };
            let write = match inst.op {
                Csrrw | Csrrwi => Some(src),
                Csrrs | Csrrsi => (inst.rs1 != 0).then_some(old | src),
                Csrrc | Csrrci => (inst.rs1 != 0).then_some(old & !src),
                _ => unreachable!(),
            };
            if let Some(value) = write {
                if mach.csr.write(addr, value, mach.mode).is_err() {
                    return Ok(Exec::Fault(TrapCause::IllegalInstruction, inst.raw as u64));
                }
            }
            mach.set_gpr(inst.rd, old);
        }
    }

    mach.pc = next_pc;
    Ok(Exec::Done)
}

fn record_probe(mach: &mut MachineState, va: u64, res: &TranslationResult) {
    let Some((lo, hi)) = mach.probe_range else {
        return;
    };
    if va < lo || va >= hi {
        return;
    }
    mach.probes.push(StoreProbe {
        cycle: mach.cycles,
        va,
        ok: res.outcome.is_ok(),
        fault_code: res.outcome.err().map(|c| c.code()),
        tlb_hit: res.tlb_hit,
        walk_cycles: res.cycles,
        delivered_at_start: res.delivered_at_start,
        delivered_at_check: res.delivered_at_check,
        overridden: res.u_bit_overridden,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csr::{CSR_MEDELEG, CSR_MTVEC, CSR_SEPC, CSR_STVEC, SATP_MODE_SV39};
    use crate::isa::Instruction;
    use crate::mem::{MemoryImage, Segment, MMIO_EXIT, RAM_BASE};
    use crate::mmu::{Pte, PAGE_SHIFT};

    fn image_from_words(addr: u64, words: &[u32]) -> MemoryImage {
        let bytes = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        MemoryImage {
            entry: addr,
            segments: vec![Segment { addr, bytes }],
            symbols: Default::default(),
        }
    }

    fn sim_with_words(words: &[u32]) -> Simulation {
        let image = image_from_words(RAM_BASE, words);
        Simulation::new(
            &image,
            None,
            &SimOptions {
                mem_size: 4 * 1024 * 1024,
                ..SimOptions::default()
            },
        )
    }

    #[test]
    fn addi_costs_one_cycle() {
        let mut sim = sim_with_words(&[Instruction::new(Op::Addi, 5, 0, 0, 7).raw]);
        let before = sim.machine.cycles;
        assert_eq!(sim.step(), StepOutcome::Executed);
        assert_eq!(sim.machine.gpr(5), 7);
        assert_eq!(sim.machine.cycles - before, 1);
    }

    #[test]
    fn x0_stays_zero() {
        let mut sim = sim_with_words(&[
            Instruction::new(Op::Addi, 0, 0, 0, 123).raw,
            Instruction::new(Op::Add, 0, 0, 0, 0).raw,
        ]);
        sim.step();
        sim.step();
        assert_eq!(sim.machine.gpr(0), 0);
    }

    #[test]
    fn load_pays_memory_surcharge() {
        // ld x5, 0x100(x0) is out of RAM; use a real address via addi base.
        let base = RAM_BASE + 0x200;
        let mut sim = sim_with_words(&[
            // lui x6, 0x80000 ; base in x6 via lui (0x8000_0000 sign-extends, mask back)
            Instruction::new(Op::Ld, 5, 6, 0, 0x200).raw,
        ]);
        sim.machine.set_gpr(6, RAM_BASE);
        sim.machine.mem.write(base, 8, 0xdead_beef).unwrap();
        let before = sim.machine.cycles;
        sim.step();
        assert_eq!(sim.machine.gpr(5), 0xdead_beef);
        // 1 base + 4 memory cycles, no translation in M-mode.
        assert_eq!(sim.machine.cycles - before, 5);
    }

    #[test]
    fn exit_store_halts() {
        let mut sim = sim_with_words(&[Instruction::new(Op::Sd, 0, 6, 5, 0).raw]);
        sim.machine.set_gpr(6, MMIO_EXIT);
        sim.machine.set_gpr(5, 42);
        assert_eq!(sim.step(), StepOutcome::Halted(42));
        assert_eq!(sim.machine.halted, Some(42));
    }

    #[test]
    fn empty_budget_cuts_at_exact_cycle_count() {
        // An empty program traps forever on illegal instructions; the run
        // must report exactly the budget.
        let mut sim = sim_with_words(&[0, 0, 0, 0]);
        let summary = sim.run(StopCondition::max_cycles(100));
        assert_eq!(summary.stop, StopReason::CycleLimit);
        assert_eq!(summary.total_cycles, 100);
    }

    #[test]
    fn ecall_delegation_round_trip() {
        // M-mode stub delegates ecall-from-U to S, drops to U, U ecalls,
        // S handler returns with sret.
        let handler = RAM_BASE + 0x100;
        let user = RAM_BASE + 0x200;
        let mut sim = sim_with_words(&[0]);
        let m = &mut sim.machine;
        m.csr
            .write(CSR_MEDELEG, 1 << 8, Mode::Machine)
            .unwrap();
        m.csr.write(CSR_STVEC, handler, Mode::Machine).unwrap();
        // S handler: csrr x5, sepc ; addi x5, x5, 4 ; csrw sepc, x5 ; sret
        for (i, w) in [
            Instruction::new(Op::Csrrs, 5, 0, 0, CSR_SEPC as i64).raw,
            Instruction::new(Op::Addi, 5, 5, 0, 4).raw,
            Instruction::new(Op::Csrrw, 0, 5, 0, CSR_SEPC as i64).raw,
            Instruction::new(Op::Sret, 0, 0, 0, 0).raw,
        ]
        .iter()
        .enumerate()
        {
            m.mem.write(handler + 4 * i as u64, 4, *w as u64).unwrap();
        }
        // User program: ecall ; addi x7, x0, 9
        m.mem
            .write(user, 4, Instruction::new(Op::Ecall, 0, 0, 0, 0).raw as u64)
            .unwrap();
        m.mem
            .write(
                user + 4,
                4,
                Instruction::new(Op::Addi, 7, 0, 0, 9).raw as u64,
            )
            .unwrap();
        m.pc = user;
        m.mode = Mode::User;

        let mut sim2 = sim;
        assert_eq!(
            sim2.step(),
            StepOutcome::Trapped(TrapCause::EcallFromU)
        );
        assert_eq!(sim2.machine.mode, Mode::Supervisor);
        assert_eq!(sim2.machine.csr.scause, 8);
        assert_eq!(sim2.machine.csr.sepc, user);
        for _ in 0..4 {
            sim2.step();
        }
        assert_eq!(sim2.machine.mode, Mode::User);
        assert_eq!(sim2.machine.pc, user + 4);
        sim2.step();
        assert_eq!(sim2.machine.gpr(7), 9);
    }

    #[test]
    fn undelegated_timer_traps_to_machine() {
        let mut sim = sim_with_words(&[Instruction::new(Op::Addi, 1, 0, 0, 1).raw; 8]);
        let m = &mut sim.machine;
        m.csr.write(CSR_MTVEC, RAM_BASE + 0x40, Mode::Machine).unwrap();
        m.csr.mie = 1 << IRQ_M_TIMER;
        m.csr.mstatus |= MSTATUS_MIE;
        m.csr.mtimecmp = 3;
        let mut seen = None;
        for _ in 0..10 {
            if let StepOutcome::InterruptTaken(c) = sim.step() {
                seen = Some(c);
                break;
            }
        }
        assert_eq!(seen, Some(TrapCause::MachineTimerInterrupt));
        assert_eq!(sim.machine.csr.mcause, (1 << 63) | 7);
        assert_eq!(sim.machine.mode, Mode::Machine);
    }

    #[test]
    fn store_page_fault_delegates_with_tval() {
        // Sv39 U-mode store to a U=0 page traps to S with stval = va.
        let root = RAM_BASE + 0x10000;
        let l1 = RAM_BASE + 0x11000;
        let l0 = RAM_BASE + 0x12000;
        let code_pa = RAM_BASE + 0x20000;
        let prot_pa = RAM_BASE + 0x21000;
        let code_va = 0x0040_0000u64;
        let prot_va = 0x0041_0000u64;

        let mut sim = sim_with_words(&[0]);
        let m = &mut sim.machine;
        let mut map = |va: u64, pa: u64, flags: u64| {
            let v2 = (va >> 30) & 0x1ff;
            let v1 = (va >> 21) & 0x1ff;
            let v0 = (va >> 12) & 0x1ff;
            m.mem
                .write(root + v2 * 8, 8, Pte::new(l1 >> PAGE_SHIFT, Pte::V).0)
                .unwrap();
            m.mem
                .write(l1 + v1 * 8, 8, Pte::new(l0 >> PAGE_SHIFT, Pte::V).0)
                .unwrap();
            m.mem
                .write(l0 + v0 * 8, 8, Pte::new(pa >> PAGE_SHIFT, flags).0)
                .unwrap();
        };
        let user_flags = Pte::V | Pte::R | Pte::W | Pte::X | Pte::U | Pte::A | Pte::D;
        let kernel_flags = Pte::V | Pte::R | Pte::W | Pte::A | Pte::D;
        map(code_va, code_pa, user_flags);
        map(prot_va, prot_pa, kernel_flags);

        // sd x5, 0(x6) at the user code page.
        m.mem
            .write(
                code_pa,
                4,
                Instruction::new(Op::Sd, 0, 6, 5, 0).raw as u64,
            )
            .unwrap();
        m.set_gpr(6, prot_va);
        m.csr.satp = (SATP_MODE_SV39 << 60) | (root >> PAGE_SHIFT);
        m.csr.medeleg = 1 << 15;
        m.csr.stvec = code_va; // anywhere mapped
        m.pc = code_va;
        m.mode = Mode::User;

        assert_eq!(sim.step(), StepOutcome::Trapped(TrapCause::StorePageFault));
        assert_eq!(sim.machine.mode, Mode::Supervisor);
        assert_eq!(sim.machine.csr.scause, 15);
        assert_eq!(sim.machine.csr.stval, prot_va);
        assert_eq!(sim.machine.csr.sepc, code_va);
        assert_eq!(sim.machine.mode_entries.supervisor, 1);
    }

    #[test]
    fn suppressed_store_commits_with_trigger_delivered() {
        // Same setup as above, but an armed IRT-1 whose delivered signal is
        // already high lets the store through and counts it.
        let root = RAM_BASE + 0x10000;
        let l1 = RAM_BASE + 0x11000;
        let l0 = RAM_BASE + 0x12000;
        let code_pa = RAM_BASE + 0x20000;
        let prot_pa = RAM_BASE + 0x21000;
        let code_va = 0x0040_0000u64;
        let prot_va = 0x0041_0000u64;

        let image = image_from_words(RAM_BASE, &[0]);
        let cfg = TrojanConfig::irt1();
        let mut sim = Simulation::new(
            &image,
            Some(cfg.clone()),
            &SimOptions {
                mem_size: 4 * 1024 * 1024,
                ..SimOptions::default()
            },
        );
        let m = &mut sim.machine;
        let mut map = |va: u64, pa: u64, flags: u64| {
            let v2 = (va >> 30) & 0x1ff;
            let v1 = (va >> 21) & 0x1ff;
            let v0 = (va >> 12) & 0x1ff;
            m.mem
                .write(root + v2 * 8, 8, Pte::new(l1 >> PAGE_SHIFT, Pte::V).0)
                .unwrap();
            m.mem
                .write(l1 + v1 * 8, 8, Pte::new(l0 >> PAGE_SHIFT, Pte::V).0)
                .unwrap();
            m.mem
                .write(l0 + v0 * 8, 8, Pte::new(pa >> PAGE_SHIFT, flags).0)
                .unwrap();
        };
        map(
            code_va,
            code_pa,
            Pte::V | Pte::R | Pte::W | Pte::X | Pte::U | Pte::A | Pte::D,
        );
        map(prot_va, prot_pa, Pte::V | Pte::R | Pte::W | Pte::A | Pte::D);
        m.mem
            .write(
                code_pa,
                4,
                Instruction::new(Op::Sd, 0, 6, 5, 0).raw as u64,
            )
            .unwrap();
        m.set_gpr(6, prot_va);
        m.set_gpr(5, 0x1122_3344);
        m.set_gpr(20, cfg.activation.0);
        m.set_gpr(21, cfg.activation.1);
        m.csr.satp = (SATP_MODE_SV39 << 60) | (root >> PAGE_SHIFT);
        m.csr.medeleg = 1 << 15;
        m.pc = code_va;
        m.mode = Mode::User;

        // Let the armed trigger mature through the delay line first.
        advance(&mut sim.machine, &mut sim.trojan, 10).unwrap();
        assert!(sim.trojan.as_ref().unwrap().payload_delivered_now());

        assert_eq!(sim.step(), StepOutcome::Executed);
        assert_eq!(sim.machine.mem.read(prot_pa, 8), Some(0x1122_3344));
        assert_eq!(
            sim.trojan.as_ref().unwrap().stats().suppressed_faults,
            1
        );
    }

    #[test]
    fn mode_cycles_partition_total() {
        let mut sim = sim_with_words(&[Instruction::new(Op::Addi, 1, 1, 0, 1).raw; 64]);
        for _ in 0..64 {
            sim.step();
        }
        let m = &sim.machine;
        assert_eq!(m.mode_cycles.total(), m.cycles);
    }
}
