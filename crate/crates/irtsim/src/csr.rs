//! Minimal machine/supervisor CSR file.
//!
//! Only the registers the privileged scenarios need are implemented.
//! Reserved bits read as zero; writes are masked per register. The timer
//! compare register is exposed as a custom machine CSR (`0x7c0`) so guests
//! can arm it without a memory-mapped timer block.

use serde::{Deserialize, Serialize};

use crate::machine::Mode;

pub const CSR_SSTATUS: u16 = 0x100;
pub const CSR_SIE: u16 = 0x104;
pub const CSR_STVEC: u16 = 0x105;
pub const CSR_SSCRATCH: u16 = 0x140;
pub const CSR_SEPC: u16 = 0x141;
pub const CSR_SCAUSE: u16 = 0x142;
pub const CSR_STVAL: u16 = 0x143;
pub const CSR_SIP: u16 = 0x144;
pub const CSR_SATP: u16 = 0x180;
pub const CSR_MSTATUS: u16 = 0x300;
pub const CSR_MEDELEG: u16 = 0x302;
pub const CSR_MIDELEG: u16 = 0x303;
pub const CSR_MIE: u16 = 0x304;
pub const CSR_MTVEC: u16 = 0x305;
pub const CSR_MSCRATCH: u16 = 0x340;
pub const CSR_MEPC: u16 = 0x341;
pub const CSR_MCAUSE: u16 = 0x342;
pub const CSR_MTVAL: u16 = 0x343;
pub const CSR_MIP: u16 = 0x344;
pub const CSR_MTIMECMP: u16 = 0x7c0;
pub const CSR_MCYCLE: u16 = 0xb00;
pub const CSR_TIME: u16 = 0xc01;

// mstatus bit positions.
pub const MSTATUS_SIE: u64 = 1 << 1;
pub const MSTATUS_MIE: u64 = 1 << 3;
pub const MSTATUS_SPIE: u64 = 1 << 5;
pub const MSTATUS_MPIE: u64 = 1 << 7;
pub const MSTATUS_SPP: u64 = 1 << 8;
pub const MSTATUS_MPP_MASK: u64 = 0b11 << 11;
pub const MSTATUS_SUM: u64 = 1 << 18;

const MSTATUS_WRITABLE: u64 = MSTATUS_SIE
    | MSTATUS_MIE
    | MSTATUS_SPIE
    | MSTATUS_MPIE
    | MSTATUS_SPP
    | MSTATUS_MPP_MASK
    | MSTATUS_SUM;

const SSTATUS_MASK: u64 = MSTATUS_SIE | MSTATUS_SPIE | MSTATUS_SPP | MSTATUS_SUM;

// Interrupt numbers (bit positions in mie/mip/mideleg).
pub const IRQ_S_TIMER: u64 = 5;
pub const IRQ_M_TIMER: u64 = 7;

const SIX_MASK: u64 = 1 << IRQ_S_TIMER;
const MIX_MASK: u64 = (1 << IRQ_M_TIMER) | (1 << IRQ_S_TIMER);

// Exception codes the delegation register accepts.
const MEDELEG_MASK: u64 =
    (1 << 2) | (1 << 3) | (1 << 8) | (1 << 9) | (1 << 12) | (1 << 13) | (1 << 15);

pub const SATP_MODE_BARE: u64 = 0;
pub const SATP_MODE_SV39: u64 = 8;

/// Error raised by CSR accesses that must trap as illegal instructions:
/// unknown address, insufficient privilege, or a write to a read-only CSR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsrAccessError;

/// Architected CSR state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsrFile {
    pub mstatus: u64,
    pub mtvec: u64,
    pub mepc: u64,
    pub mcause: u64,
    pub mtval: u64,
    pub medeleg: u64,
    pub mideleg: u64,
    pub mie: u64,
    pub mip: u64,
    pub satp: u64,
    pub stvec: u64,
    pub sepc: u64,
    pub scause: u64,
    pub stval: u64,
    pub sscratch: u64,
    pub mscratch: u64,
    pub mtime: u64,
    pub mtimecmp: u64,
}

impl CsrFile {
    pub fn new() -> Self {
        CsrFile {
            mtimecmp: u64::MAX,
            ..Default::default()
        }
    }

    /// Effective mip with the hardware-driven timer bit folded in.
    pub fn mip_effective(&self) -> u64 {
        let mut mip = self.mip;
        if self.mtime >= self.mtimecmp {
            mip |= 1 << IRQ_M_TIMER;
        }
        mip
    }

    pub fn satp_mode(&self) -> u64 {
        self.satp >> 60
    }

    pub fn satp_root_ppn(&self) -> u64 {
        self.satp & ((1 << 44) - 1)
    }

    pub fn mpp(&self) -> Mode {
        match (self.mstatus & MSTATUS_MPP_MASK) >> 11 {
            0 => Mode::User,
            1 => Mode::Supervisor,
            _ => Mode::Machine,
        }
    }

    pub fn set_mpp(&mut self, mode: Mode) {
        self.mstatus = (self.mstatus & !MSTATUS_MPP_MASK) | ((mode.encode() as u64) << 11);
    }

    pub fn spp(&self) -> Mode {
        if self.mstatus & MSTATUS_SPP != 0 {
            Mode::Supervisor
        } else {
            Mode::User
        }
    }

    pub fn sum(&self) -> bool {
        self.mstatus & MSTATUS_SUM != 0
    }

    fn check_privilege(addr: u16, mode: Mode) -> Result<(), CsrAccessError> {
        let required = (addr >> 8) & 0b11;
        if (mode.encode() as u16) < required {
            return Err(CsrAccessError);
        }
        Ok(())
    }

    /// Reads a CSR, enforcing the privilege encoded in the address.
    pub fn read(&self, addr: u16, mode: Mode, cycles: u64) -> Result<u64, CsrAccessError> {
        Self::check_privilege(addr, mode)?;
        let value = match addr {
            CSR_SSTATUS => self.mstatus & SSTATUS_MASK,
            CSR_SIE => self.mie & SIX_MASK,
            CSR_STVEC => self.stvec,
            CSR_SSCRATCH => self.sscratch,
            CSR_SEPC => self.sepc,
            CSR_SCAUSE => self.scause,
            CSR_STVAL => self.stval,
            CSR_SIP => self.mip_effective() & SIX_MASK,
            CSR_SATP => self.satp,
            CSR_MSTATUS => self.mstatus,
            CSR_MEDELEG => self.medeleg,
            CSR_MIDELEG => self.mideleg,
            CSR_MIE => self.mie,
            CSR_MTVEC => self.mtvec,
            CSR_MSCRATCH => self.mscratch,
            CSR_MEPC => self.mepc,
            CSR_MCAUSE => self.mcause,
            CSR_MTVAL => self.mtval,
            CSR_MIP => self.mip_effective(),
            CSR_MTIMECMP => self.mtimecmp,
            CSR_MCYCLE => cycles,
            CSR_TIME => self.mtime,
            _ => return Err(CsrAccessError),
        };
        Ok(value)
    }

    /// Writes a CSR with per-register masking.
    pub fn write(&mut self, addr: u16, value: u64, mode: Mode) -> Result<(), CsrAccessError> {
        Self::check_privilege(addr, mode)?;
        if (addr >> 10) & 0b11 == 0b11 {
            // Read-only address range.
            return Err(CsrAccessError);
        }
        match addr {
            CSR_SSTATUS => {
                self.mstatus = (self.mstatus & !SSTATUS_MASK) | (value & SSTATUS_MASK);
            }
            CSR_SIE => {
                self.mie = (self.mie & !SIX_MASK) | (value & SIX_MASK);
            }
            CSR_STVEC => self.stvec = value & !0b11,
            CSR_SSCRATCH => self.sscratch = value,
            CSR_SEPC => self.sepc = value & !0b1,
            CSR_SCAUSE => self.scause = value,
            CSR_STVAL => self.stval = value,
            CSR_SIP => {
                self.mip = (self.mip & !SIX_MASK) | (value & SIX_MASK);
            }
            CSR_SATP => {
                // Only Bare and Sv39 are accepted; other MODE values leave
                // the register untouched.
                let req_mode = value >> 60;
                if req_mode == SATP_MODE_BARE || req_mode == SATP_MODE_SV39 {
                    self.satp = (req_mode << 60) | (value & ((1 << 44) - 1));
                }
            }
            CSR_MSTATUS => {
                self.mstatus = (self.mstatus & !MSTATUS_WRITABLE) | (value & MSTATUS_WRITABLE);
            }
            CSR_MEDELEG => self.medeleg = value & MEDELEG_MASK,
            CSR_MIDELEG => self.mideleg = value & MIX_MASK,
            CSR_MIE => self.mie = value & MIX_MASK,
            CSR_MTVEC => self.mtvec = value & !0b11,
            CSR_MSCRATCH => self.mscratch = value,
            CSR_MEPC => self.mepc = value & !0b1,
            CSR_MCAUSE => self.mcause = value,
            CSR_MTVAL => self.mtval = value,
            CSR_MIP => self.mip = value & MIX_MASK,
            CSR_MTIMECMP => self.mtimecmp = value,
            _ => return Err(CsrAccessError),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn satp_rejects_unsupported_modes() {
        let mut csr = CsrFile::new();
        csr.write(CSR_SATP, (SATP_MODE_SV39 << 60) | 0x1234, Mode::Supervisor)
            .unwrap();
        assert_eq!(csr.satp_mode(), SATP_MODE_SV39);
        assert_eq!(csr.satp_root_ppn(), 0x1234);
        // MODE=9 (Sv48) is ignored entirely.
        csr.write(CSR_SATP, (9 << 60) | 0x9999, Mode::Supervisor)
            .unwrap();
        assert_eq!(csr.satp_root_ppn(), 0x1234);
        // Bare clears.
        csr.write(CSR_SATP, 0, Mode::Supervisor).unwrap();
        assert_eq!(csr.satp_mode(), SATP_MODE_BARE);
    }

    #[test]
    fn privilege_gates_machine_csrs() {
        let mut csr = CsrFile::new();
        assert_eq!(
            csr.write(CSR_MSTATUS, 0, Mode::Supervisor),
            Err(CsrAccessError)
        );
        assert_eq!(csr.read(CSR_MEPC, Mode::User, 0), Err(CsrAccessError));
        assert!(csr.write(CSR_MSTATUS, MSTATUS_MIE, Mode::Machine).is_ok());
    }

    #[test]
    fn read_only_range_rejects_writes() {
        let mut csr = CsrFile::new();
        assert_eq!(csr.write(CSR_TIME, 5, Mode::Machine), Err(CsrAccessError));
        assert_eq!(csr.write(CSR_MCYCLE, 5, Mode::Machine), Err(CsrAccessError));
    }

    #[test]
    fn sstatus_is_a_masked_view() {
        let mut csr = CsrFile::new();
        csr.write(CSR_MSTATUS, MSTATUS_MIE | MSTATUS_SIE | MSTATUS_SUM, Mode::Machine)
            .unwrap();
        let s = csr.read(CSR_SSTATUS, Mode::Supervisor, 0).unwrap();
        assert_eq!(s, MSTATUS_SIE | MSTATUS_SUM);
        // Writing sstatus cannot touch MIE.
        csr.write(CSR_SSTATUS, 0, Mode::Supervisor).unwrap();
        assert_ne!(csr.mstatus & MSTATUS_MIE, 0);
        assert_eq!(csr.mstatus & MSTATUS_SIE, 0);
    }

    #[test]
    fn timer_pends_on_compare() {
        let mut csr = CsrFile::new();
        csr.mtimecmp = 100;
        csr.mtime = 99;
        assert_eq!(csr.mip_effective() & (1 << IRQ_M_TIMER), 0);
        csr.mtime = 100;
        assert_ne!(csr.mip_effective() & (1 << IRQ_M_TIMER), 0);
    }
}
