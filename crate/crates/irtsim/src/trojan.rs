//! Hardware-trojan layer: the two interrupt-resilient trigger circuits, the
//! trigger propagation delay line, and the U-bit payload controller.
//!
//! The selectively-ready trigger (IRT-1) taps a pair of general purpose
//! registers and compares their live contents against a 128-bit activation
//! constant; a context-switch save drops it and the restore re-arms it with
//! no software involvement. The always-ready trigger (IRT-2) latches a
//! two-state FSM off the integer adder's operands and holds until an
//! explicit deactivation pair shows up. Either way, the raw trigger passes
//! through an L-cycle delay line that models the multi-cycle path from
//! trigger gates to the payload in the MMU.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which trigger circuit is wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrojanKind {
    Disabled,
    Irt1,
    Irt2,
}

impl Default for TrojanKind {
    fn default() -> Self {
        TrojanKind::Disabled
    }
}

/// Static trojan parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrojanConfig {
    pub kind: TrojanKind,
    /// GPR pair hosting the IRT-1 comparator, (high, low).
    pub host_regs: (u8, u8),
    /// 128-bit activation constant as (high, low) 64-bit halves.
    pub activation: (u64, u64),
    /// 128-bit deactivation constant (IRT-2 only).
    pub deactivation: (u64, u64),
    /// Delay-line length L in cycles.
    pub latency: u32,
    /// Compared low-order bits c of the 128-bit host value; 128 = full match.
    pub comparator_width: u32,
}

/// Default activation/deactivation constants used by the bundled scenarios.
pub const DEFAULT_ACTIVATION: (u64, u64) = (0xdead_beef_cafe_f00d, 0x0123_4567_89ab_cdef);
pub const DEFAULT_DEACTIVATION: (u64, u64) = (0x0bad_0bad_0bad_0bad, 0xfeed_face_dead_c0de);

impl Default for TrojanConfig {
    fn default() -> Self {
        TrojanConfig {
            kind: TrojanKind::Disabled,
            host_regs: (20, 21),
            activation: DEFAULT_ACTIVATION,
            deactivation: DEFAULT_DEACTIVATION,
            latency: 8,
            comparator_width: 128,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrojanConfigError {
    #[error("host registers must be distinct and nonzero")]
    BadHostRegs,
    #[error("activation and deactivation constants must differ")]
    ConstantsEqual,
    #[error("latency must be at least 1")]
    ZeroLatency,
    #[error("comparator width must be 1..=128")]
    BadWidth,
}

impl TrojanConfig {
    pub fn disabled() -> Self {
        TrojanConfig::default()
    }

    pub fn irt1() -> Self {
        TrojanConfig {
            kind: TrojanKind::Irt1,
            ..TrojanConfig::default()
        }
    }

    pub fn irt2() -> Self {
        TrojanConfig {
            kind: TrojanKind::Irt2,
            ..TrojanConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrojanConfigError> {
        let (a, b) = self.host_regs;
        if a == b || a == 0 || b == 0 || a > 31 || b > 31 {
            return Err(TrojanConfigError::BadHostRegs);
        }
        if self.activation == self.deactivation {
            return Err(TrojanConfigError::ConstantsEqual);
        }
        if self.latency == 0 {
            return Err(TrojanConfigError::ZeroLatency);
        }
        if self.comparator_width == 0 || self.comparator_width > 128 {
            return Err(TrojanConfigError::BadWidth);
        }
        Ok(())
    }
}

/// IRT-2 support FSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FsmState {
    S0,
    S1,
}

/// Payload activity counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadStats {
    /// Store page faults converted into successful stores.
    pub suppressed_faults: u64,
    /// Cycles with the raw trigger high.
    pub raw_on_cycles: u64,
    /// Cycles with the delivered (delayed) trigger high.
    pub delivered_on_cycles: u64,
    /// Rising edges of the raw trigger (IRT-1) or FSM entries to S1 (IRT-2).
    pub activations: u64,
    /// Falling edges of raw (IRT-1) or FSM returns to S0 (IRT-2).
    pub deactivations: u64,
}

/// One edge of a boolean trace signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub cycle: u64,
    pub high: bool,
}

/// Raw/delivered/FSM edge history, recorded when tracing is on.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TriggerTrace {
    pub raw: Vec<Edge>,
    pub delivered: Vec<Edge>,
    pub fsm: Vec<Edge>,
}

impl TriggerTrace {
    fn edge(list: &mut Vec<Edge>, cycle: u64, high: bool) {
        list.push(Edge { cycle, high });
    }

    /// Reconstructs the signal value at `cycle` from the edge list
    /// (false before the first edge).
    pub fn level_at(edges: &[Edge], cycle: u64) -> bool {
        match edges.partition_point(|e| e.cycle <= cycle) {
            0 => false,
            n => edges[n - 1].high,
        }
    }
}

/// Live trigger state plus counters.
#[derive(Debug, Clone)]
pub struct TrojanRuntime {
    cfg: TrojanConfig,
    fsm: FsmState,
    delay_line: VecDeque<bool>,
    delivered: bool,
    last_raw: bool,
    stats: PayloadStats,
    trace: Option<TriggerTrace>,
}

impl TrojanRuntime {
    pub fn new(cfg: TrojanConfig) -> Self {
        let latency = cfg.latency.max(1) as usize;
        TrojanRuntime {
            cfg,
            fsm: FsmState::S0,
            delay_line: VecDeque::from(vec![false; latency]),
            delivered: false,
            last_raw: false,
            stats: PayloadStats::default(),
            trace: None,
        }
    }

    pub fn with_trace(cfg: TrojanConfig) -> Self {
        let mut rt = Self::new(cfg);
        rt.trace = Some(TriggerTrace::default());
        rt
    }

    pub fn config(&self) -> &TrojanConfig {
        &self.cfg
    }

    pub fn stats(&self) -> PayloadStats {
        self.stats
    }

    pub fn fsm(&self) -> FsmState {
        self.fsm
    }

    pub fn trace(&self) -> Option<&TriggerTrace> {
        self.trace.as_ref()
    }

    pub fn take_trace(&mut self) -> Option<TriggerTrace> {
        self.trace.take()
    }

    /// Compares the low `c` bits of `hi ++ lo` against the same slice of the
    /// reference pair.
    fn masked_match(pair: (u64, u64), reference: (u64, u64), c: u32) -> bool {
        if c >= 128 {
            return pair == reference;
        }
        if c <= 64 {
            let mask = if c == 64 { u64::MAX } else { (1u64 << c) - 1 };
            return pair.1 & mask == reference.1 & mask;
        }
        let hi_bits = c - 64;
        let hi_mask = if hi_bits == 64 {
            u64::MAX
        } else {
            (1u64 << hi_bits) - 1
        };
        pair.1 == reference.1 && pair.0 & hi_mask == reference.0 & hi_mask
    }

    /// IRT-1 raw trigger: pure comparator over the live host registers.
    pub fn sample_irt1(&self, gprs: &[u64; 32]) -> bool {
        let (a, b) = self.cfg.host_regs;
        Self::masked_match(
            (gprs[a as usize], gprs[b as usize]),
            self.cfg.activation,
            self.cfg.comparator_width,
        )
    }

    /// Raw trigger value for the current cycle given the architectural state.
    pub fn sample_raw(&self, gprs: &[u64; 32]) -> bool {
        match self.cfg.kind {
            TrojanKind::Disabled => false,
            TrojanKind::Irt1 => self.sample_irt1(gprs),
            TrojanKind::Irt2 => self.fsm == FsmState::S1,
        }
    }

    /// Feeds the IRT-2 FSM with the operands of an executed register-register
    /// `add`. Exact 128-bit matches switch state; anything else holds it.
    pub fn observe_add(&mut self, op_a: u64, op_b: u64, cycle: u64) {
        if self.cfg.kind != TrojanKind::Irt2 {
            return;
        }
        let pair = (op_a, op_b);
        let next = if pair == self.cfg.activation {
            FsmState::S1
        } else if pair == self.cfg.deactivation {
            FsmState::S0
        } else {
            return;
        };
        if next != self.fsm {
            match next {
                FsmState::S1 => self.stats.activations += 1,
                FsmState::S0 => self.stats.deactivations += 1,
            }
            if let Some(t) = self.trace.as_mut() {
                TriggerTrace::edge(&mut t.fsm, cycle, next == FsmState::S1);
            }
            self.fsm = next;
        }
    }

    /// Advances the delay line by one elapsed cycle.
    ///
    /// Pushes the raw sample, pops the L-cycles-old one into `delivered`,
    /// and maintains counters and traces. Must be called exactly once per
    /// machine cycle.
    pub fn tick(&mut self, raw: bool, cycle: u64) -> bool {
        if self.cfg.kind == TrojanKind::Irt1 {
            if raw && !self.last_raw {
                self.stats.activations += 1;
            }
            if !raw && self.last_raw {
                self.stats.deactivations += 1;
            }
        }
        if let Some(t) = self.trace.as_mut() {
            if raw != self.last_raw {
                TriggerTrace::edge(&mut t.raw, cycle, raw);
            }
        }
        self.last_raw = raw;

        self.delay_line.push_back(raw);
        let out = self.delay_line.pop_front().unwrap_or(false);
        if let Some(t) = self.trace.as_mut() {
            if out != self.delivered {
                TriggerTrace::edge(&mut t.delivered, cycle, out);
            }
        }
        self.delivered = out;

        if raw {
            self.stats.raw_on_cycles += 1;
        }
        if out {
            self.stats.delivered_on_cycles += 1;
        }
        out
    }

    /// The trigger value the payload sees right now (the L-cycles-old raw).
    pub fn payload_delivered_now(&self) -> bool {
        match self.cfg.kind {
            TrojanKind::Disabled => false,
            _ => self.delivered,
        }
    }

    /// Called by the MMU when an otherwise-faulting store passed because of
    /// the U-bit override.
    pub fn note_suppressed_fault(&mut self) {
        self.stats.suppressed_faults += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gprs_with(pairs: &[(usize, u64)]) -> [u64; 32] {
        let mut g = [0u64; 32];
        for &(i, v) in pairs {
            g[i] = v;
        }
        g
    }

    #[test]
    fn delay_line_shifts_by_latency() {
        let mut rt = TrojanRuntime::new(TrojanConfig {
            kind: TrojanKind::Irt1,
            latency: 3,
            ..TrojanConfig::default()
        });
        let raw = [false, true, true, true, true];
        let mut delivered = Vec::new();
        for (i, &r) in raw.iter().enumerate() {
            delivered.push(rt.tick(r, i as u64));
        }
        assert_eq!(delivered, vec![false, false, false, false, true]);
    }

    #[test]
    fn walk_length_masking_budget() {
        // Raw constant true for a 12-cycle walk with L=8: the delivered
        // signal goes high L ticks after the rise, inside the walk.
        let mut rt = TrojanRuntime::new(TrojanConfig::irt1());
        let mut first_high = None;
        for c in 0..12u64 {
            if rt.tick(true, c) && first_high.is_none() {
                first_high = Some(c);
            }
        }
        assert_eq!(first_high, Some(8));
    }

    #[test]
    fn raw_drop_propagates_after_latency() {
        let mut rt = TrojanRuntime::new(TrojanConfig::irt1());
        for c in 0..20 {
            rt.tick(true, c);
        }
        assert!(rt.payload_delivered_now());
        // delivered(t) = raw(t - L): the drop at t=20 arrives at t=28.
        for c in 20..28 {
            rt.tick(false, c);
            assert!(rt.payload_delivered_now(), "cycle {c}");
        }
        for c in 28..40 {
            assert!(!rt.tick(false, c));
        }
    }

    #[test]
    fn irt1_comparator_full_and_masked() {
        let cfg = TrojanConfig {
            kind: TrojanKind::Irt1,
            activation: (0xAAAA_AAAA_AAAA_AAAA, 0x5555_5555_5555_55A5),
            ..TrojanConfig::default()
        };
        let rt = TrojanRuntime::new(cfg.clone());
        let armed = gprs_with(&[(20, cfg.activation.0), (21, cfg.activation.1)]);
        assert!(rt.sample_irt1(&armed));
        let off = gprs_with(&[(20, cfg.activation.0 ^ 1), (21, cfg.activation.1)]);
        assert!(!rt.sample_irt1(&off));

        // c=8 compares only the low byte of the low register.
        let narrow = TrojanRuntime::new(TrojanConfig {
            comparator_width: 8,
            ..cfg
        });
        let partial = gprs_with(&[(21, 0xffff_ffff_ffff_ffA5)]);
        assert!(narrow.sample_irt1(&partial));
        let wrong = gprs_with(&[(21, 0xffff_ffff_ffff_ffA4)]);
        assert!(!narrow.sample_irt1(&wrong));
    }

    #[test]
    fn irt2_fsm_latches_across_foreign_adds() {
        let cfg = TrojanConfig::irt2();
        let mut rt = TrojanRuntime::new(cfg.clone());
        assert_eq!(rt.fsm(), FsmState::S0);
        rt.observe_add(cfg.activation.0, cfg.activation.1, 1);
        assert_eq!(rt.fsm(), FsmState::S1);
        // Unrelated adds from interleaved processes hold the state.
        for i in 0..100u64 {
            rt.observe_add(i, i.wrapping_mul(3), 2 + i);
        }
        assert_eq!(rt.fsm(), FsmState::S1);
        rt.observe_add(cfg.deactivation.0, cfg.deactivation.1, 200);
        assert_eq!(rt.fsm(), FsmState::S0);
        assert_eq!(rt.stats().activations, 1);
        assert_eq!(rt.stats().deactivations, 1);
    }

    #[test]
    fn disabled_never_delivers() {
        let mut rt = TrojanRuntime::new(TrojanConfig::disabled());
        for c in 0..100 {
            assert!(!rt.tick(rt.sample_raw(&[0; 32]), c));
        }
        assert!(!rt.payload_delivered_now());
        assert_eq!(rt.stats(), PayloadStats::default());
    }

    #[test]
    fn stats_invariant_suppressed_le_delivered() {
        let mut rt = TrojanRuntime::new(TrojanConfig::irt1());
        for c in 0..50 {
            rt.tick(true, c);
        }
        rt.note_suppressed_fault();
        let s = rt.stats();
        assert!(s.suppressed_faults <= s.delivered_on_cycles);
    }

    #[test]
    fn trace_levels_reconstruct() {
        let mut rt = TrojanRuntime::with_trace(TrojanConfig {
            latency: 2,
            kind: TrojanKind::Irt1,
            ..TrojanConfig::default()
        });
        let raw = [false, true, true, false, true];
        for (c, &r) in raw.iter().enumerate() {
            rt.tick(r, c as u64);
        }
        let t = rt.trace().unwrap();
        for (c, &r) in raw.iter().enumerate() {
            assert_eq!(TriggerTrace::level_at(&t.raw, c as u64), r);
        }
    }
}
