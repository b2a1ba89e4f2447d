//! Sv39 virtual-to-physical translation: three-level walk, a small FIFO
//! TLB, permission checking with the trojan's U-bit override hook, and
//! per-translation cycle accounting.
//!
//! Walk cycles are charged to the machine *before* the permission check
//! runs, so a trigger raised shortly before a store has the whole walk to
//! mature through the delay line. That ordering is what the multi-cycle-path
//! race experiment exercises.

use serde::{Deserialize, Serialize};

use crate::csr::SATP_MODE_SV39;
use crate::machine::{advance, MachineState, Mode, TrapCause};
use crate::trojan::TrojanRuntime;

pub const PAGE_SHIFT: u64 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

/// Decoded page table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte(pub u64);

impl Pte {
    pub const V: u64 = 1 << 0;
    pub const R: u64 = 1 << 1;
    pub const W: u64 = 1 << 2;
    pub const X: u64 = 1 << 3;
    pub const U: u64 = 1 << 4;
    pub const G: u64 = 1 << 5;
    pub const A: u64 = 1 << 6;
    pub const D: u64 = 1 << 7;

    pub fn new(ppn: u64, flags: u64) -> Self {
        Pte(((ppn & ((1 << 44) - 1)) << 10) | (flags & 0xff))
    }

    pub fn valid(self) -> bool {
        self.0 & Self::V != 0
    }
    pub fn readable(self) -> bool {
        self.0 & Self::R != 0
    }
    pub fn writable(self) -> bool {
        self.0 & Self::W != 0
    }
    pub fn executable(self) -> bool {
        self.0 & Self::X != 0
    }
    pub fn user(self) -> bool {
        self.0 & Self::U != 0
    }
    pub fn accessed(self) -> bool {
        self.0 & Self::A != 0
    }
    pub fn dirty(self) -> bool {
        self.0 & Self::D != 0
    }
    pub fn ppn(self) -> u64 {
        (self.0 >> 10) & ((1 << 44) - 1)
    }
    pub fn is_leaf(self) -> bool {
        self.0 & (Self::R | Self::X) != 0
    }
    /// R=0, W=1 is a reserved leaf encoding.
    pub fn reserved_encoding(self) -> bool {
        self.0 & Self::W != 0 && self.0 & Self::R == 0
    }
    pub fn flags(self) -> u64 {
        self.0 & 0xff
    }
}

/// Kind of memory access being translated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Fetch,
    Load,
    Store,
}

impl Access {
    pub fn page_fault(self) -> TrapCause {
        match self {
            Access::Fetch => TrapCause::InstructionPageFault,
            Access::Load => TrapCause::LoadPageFault,
            Access::Store => TrapCause::StorePageFault,
        }
    }
}

/// A translation request.
#[derive(Debug, Clone, Copy)]
pub struct TranslationRequest {
    pub va: u64,
    pub access: Access,
    pub mode: Mode,
    pub sum: bool,
}

/// One PTE read of a walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkStep {
    pub level: u8,
    pub pte_addr: u64,
    pub pte: u64,
}

pub type WalkTrace = Vec<WalkStep>;

/// Result of one translation.
#[derive(Debug, Clone)]
pub struct TranslationResult {
    pub outcome: Result<u64, TrapCause>,
    /// Extra cycles consumed by the walk (0 on a TLB hit).
    pub cycles: u64,
    pub walk: WalkTrace,
    pub tlb_hit: bool,
    pub u_bit_overridden: bool,
    /// Delivered-trigger level when the translation began.
    pub delivered_at_start: bool,
    /// Delivered-trigger level at the permission check.
    pub delivered_at_check: bool,
}

#[derive(Debug, Clone, Copy)]
struct TlbEntry {
    vpn: u64,
    ppn: u64,
    flags: u64,
}

/// Fixed-capacity FIFO TLB keyed by virtual page number.
///
/// Superpage walks insert the specific 4 KiB page they translated. The TLB
/// caches the original PTE flags, never the overridden U bit, so every hit
/// re-evaluates the override at access time.
#[derive(Debug, Clone)]
pub struct Tlb {
    entries: Vec<TlbEntry>,
    capacity: usize,
    next: usize,
    pub enabled: bool,
}

pub const TLB_CAPACITY_DEFAULT: usize = 16;

impl Default for Tlb {
    fn default() -> Self {
        Tlb::new(TLB_CAPACITY_DEFAULT)
    }
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Tlb {
            entries: Vec::with_capacity(capacity),
            capacity,
            next: 0,
            enabled: true,
        }
    }

    fn lookup(&self, vpn: u64) -> Option<(u64, u64)> {
        if !self.enabled {
            return None;
        }
        self.entries
            .iter()
            .find(|e| e.vpn == vpn)
            .map(|e| (e.ppn, e.flags))
    }

    fn insert(&mut self, vpn: u64, ppn: u64, flags: u64) {
        if !self.enabled {
            return;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(TlbEntry { vpn, ppn, flags });
        } else {
            // FIFO replacement.
            self.entries[self.next] = TlbEntry { vpn, ppn, flags };
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn flush(&mut self) {
        self.entries.clear();
        self.next = 0;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn vpn_parts(va: u64) -> [u64; 3] {
    [
        (va >> 12) & 0x1ff,
        (va >> 21) & 0x1ff,
        (va >> 30) & 0x1ff,
    ]
}

/// Sv39 canonical form: bits 63..39 equal bit 38.
pub fn canonical(va: u64) -> bool {
    let shifted = (va as i64) << 25 >> 25;
    shifted as u64 == va
}

/// Outcome of a page-table walk: leaf PTE, its level, and the PTE reads.
pub struct WalkOutcome {
    pub pte: Pte,
    pub level: u8,
    pub trace: WalkTrace,
}

/// Standard Sv39 descent. Each PTE read costs `mem_access_cycles` and is
/// charged as it happens, so the trojan delay line advances during the walk.
/// A PTE located outside physical RAM is treated as invalid.
pub fn walk(
    root_ppn: u64,
    va: u64,
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
    access: Access,
) -> Result<Result<WalkOutcome, TrapCause>, crate::machine::Stopped> {
    let vpn = vpn_parts(va);
    let fault = access.page_fault();
    let mut table = root_ppn * PAGE_SIZE;
    let mut trace = WalkTrace::new();
    for level in (0..3u8).rev() {
        let pte_addr = table + vpn[level as usize] * 8;
        advance(mach, trojan, mach.timing.mem_access_cycles)?;
        let raw = match mach.mem.read(pte_addr, 8) {
            Some(v) if mach.mem.in_ram(pte_addr, 8) => v,
            _ => {
                return Ok(Err(fault));
            }
        };
        trace.push(WalkStep {
            level,
            pte_addr,
            pte: raw,
        });
        let pte = Pte(raw);
        if !pte.valid() || pte.reserved_encoding() {
            return Ok(Err(fault));
        }
        if pte.is_leaf() {
            // Superpage leaves must have aligned PPNs.
            let low_mask = match level {
                2 => (1 << 18) - 1,
                1 => (1 << 9) - 1,
                _ => 0,
            };
            if pte.ppn() & low_mask != 0 {
                return Ok(Err(fault));
            }
            return Ok(Ok(WalkOutcome { pte, level, trace }));
        }
        if level == 0 {
            return Ok(Err(fault));
        }
        table = pte.ppn() * PAGE_SIZE;
    }
    unreachable!("walk loop always returns");
}

/// Result of a permission check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermissionOk {
    /// The check passed only because the U bit was spoofed.
    pub used_override: bool,
}

/// Leaf permission check.
///
/// `override_u` presents a spoofed U=1 to the user-store visibility check
/// only; it never tightens anything. Supervisor accesses judge the real U
/// bit, so the override can suppress a fault but cannot create one. A and D
/// are required up front because the tables are built with them set and
/// there is no hardware A/D update.
pub fn check_permission(
    pte: Pte,
    req: &TranslationRequest,
    override_u: bool,
) -> Result<PermissionOk, TrapCause> {
    let fault = req.access.page_fault();
    if !pte.accessed() {
        return Err(fault);
    }
    let perm = match req.access {
        Access::Fetch => pte.executable(),
        Access::Load => pte.readable(),
        Access::Store => pte.writable() && pte.dirty(),
    };
    if !perm {
        return Err(fault);
    }
    let mut used_override = false;
    match req.mode {
        Mode::User => {
            let effective_u =
                pte.user() || (override_u && req.access == Access::Store);
            if !effective_u {
                return Err(fault);
            }
            used_override = !pte.user();
        }
        Mode::Supervisor => {
            if pte.user() {
                let allowed = req.sum && req.access != Access::Fetch;
                if !allowed {
                    return Err(fault);
                }
            }
        }
        Mode::Machine => {}
    }
    Ok(PermissionOk { used_override })
}

/// Full translation: Bare/Machine identity, TLB lookup, walk on miss, then
/// the permission check with the trojan's delivered trigger as `override_u`.
pub fn translate(
    req: TranslationRequest,
    mach: &mut MachineState,
    trojan: &mut Option<TrojanRuntime>,
) -> Result<TranslationResult, crate::machine::Stopped> {
    let delivered_at_start = trojan
        .as_ref()
        .map(|t| t.payload_delivered_now())
        .unwrap_or(false);
    let identity = req.mode == Mode::Machine || mach.csr.satp_mode() != SATP_MODE_SV39;
    if identity {
        return Ok(TranslationResult {
            outcome: Ok(req.va),
            cycles: 0,
            walk: WalkTrace::new(),
            tlb_hit: false,
            u_bit_overridden: false,
            delivered_at_start,
            delivered_at_check: delivered_at_start,
        });
    }

    let fault = |cause: TrapCause, cycles: u64, walk: WalkTrace, hit: bool, dac: bool| {
        TranslationResult {
            outcome: Err(cause),
            cycles,
            walk,
            tlb_hit: hit,
            u_bit_overridden: false,
            delivered_at_start,
            delivered_at_check: dac,
        }
    };

    if !canonical(req.va) {
        return Ok(fault(
            req.access.page_fault(),
            0,
            WalkTrace::new(),
            false,
            delivered_at_start,
        ));
    }

    let vpn = req.va >> PAGE_SHIFT;
    let offset = req.va & (PAGE_SIZE - 1);

    if let Some((ppn, flags)) = mach.tlb.lookup(vpn) {
        let delivered = trojan
            .as_ref()
            .map(|t| t.payload_delivered_now())
            .unwrap_or(false);
        let check = check_permission(Pte::new(ppn, flags), &req, delivered);
        return Ok(match check {
            Ok(ok) => {
                if ok.used_override {
                    if let Some(t) = trojan.as_mut() {
                        t.note_suppressed_fault();
                    }
                }
                TranslationResult {
                    outcome: Ok((ppn << PAGE_SHIFT) | offset),
                    cycles: 0,
                    walk: WalkTrace::new(),
                    tlb_hit: true,
                    u_bit_overridden: ok.used_override,
                    delivered_at_start,
                    delivered_at_check: delivered,
                }
            }
            Err(cause) => fault(cause, 0, WalkTrace::new(), true, delivered),
        });
    }

    let cycles_before = mach.cycles;
    let outcome = walk(
        mach.csr.satp_root_ppn(),
        req.va,
        mach,
        trojan,
        req.access,
    )?;
    let walk_cycles = mach.cycles - cycles_before;
    let delivered = trojan
        .as_ref()
        .map(|t| t.payload_delivered_now())
        .unwrap_or(false);

    Ok(match outcome {
        Err(cause) => fault(cause, walk_cycles, WalkTrace::new(), false, delivered),
        Ok(WalkOutcome { pte, level, trace }) => {
            // Resolve the 4 KiB page inside a superpage.
            let vparts = vpn_parts(req.va);
            let page_ppn = match level {
                2 => pte.ppn() | (vparts[1] << 9) | vparts[0],
                1 => pte.ppn() | vparts[0],
                _ => pte.ppn(),
            };
            mach.tlb.insert(vpn, page_ppn, pte.flags());
            match check_permission(pte, &req, delivered) {
                Ok(ok) => {
                    if ok.used_override {
                        if let Some(t) = trojan.as_mut() {
                            t.note_suppressed_fault();
                        }
                    }
                    TranslationResult {
                        outcome: Ok((page_ppn << PAGE_SHIFT) | offset),
                        cycles: walk_cycles,
                        walk: trace,
                        tlb_hit: false,
                        u_bit_overridden: ok.used_override,
                        delivered_at_start,
                        delivered_at_check: delivered,
                    }
                }
                Err(cause) => fault(cause, walk_cycles, trace, false, delivered),
            }
        }
    })
}
