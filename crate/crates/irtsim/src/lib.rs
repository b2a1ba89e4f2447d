//! Deterministic RV64 privileged-architecture simulator with a pluggable
//! interrupt-resilient hardware-trojan layer.
//!
//! The crate bundles everything needed to reproduce the trigger/payload
//! experiments at desk scale: a fetch-decode-execute engine with M/S/U
//! modes and Sv39 translation, the two trigger circuits with their delay
//! line, a two-pass assembler, a scenario builder with a timer-driven
//! round-robin mini-kernel, switching-probability analysis for the trigger
//! gates, and an experiment runner with JSON/CSV reports.

pub mod asm;
pub mod csr;
pub mod exp;
pub mod guest;
pub mod isa;
pub mod machine;
pub mod mem;
pub mod mmu;
pub mod stealth;
pub mod trojan;

pub use machine::{MachineState, RunSummary, SimOptions, Simulation, StopCondition};
pub use mem::MemoryImage;
pub use trojan::{TrojanConfig, TrojanKind};
