//! Experiment runner: binds scenarios, simulator and trojan layer into the
//! evaluation set, plus the sweep fit and extrapolation.
//!
//! Reports embed the exact configuration used and serialize
//! deterministically; two identical runs produce identical bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guest::{
    build_scenario, build_sweep_loop, sweep_expected_instret, BuildError, Scenario,
    ScenarioParams, Verdict, EXIT_OK, EXIT_PANIC, EXIT_STORE_FAULT, FILL_VALUE, PROTECTED_BASE,
    PROTECTED_MAPPED,
};
use crate::machine::{
    ModeCounters, RunSummary, SimOptions, Simulation, StopCondition, StopReason, StoreProbe,
    Timing,
};
use crate::trojan::{Edge, TriggerTrace};

/// Simulator knobs of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimKnobs {
    pub mem_access_cycles: u64,
    pub trap_entry_cost: u64,
    pub tlb_enabled: bool,
    pub max_cycles: u64,
}

impl Default for SimKnobs {
    fn default() -> Self {
        SimKnobs {
            mem_access_cycles: 4,
            trap_entry_cost: 2,
            tlb_enabled: true,
            max_cycles: 100_000_000,
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub params: ScenarioParams,
    #[serde(default)]
    pub sim: SimKnobs,
    #[serde(default)]
    pub trace_mmu: bool,
    #[serde(default)]
    pub trace_trojan: bool,
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        RunConfig {
            params: ScenarioParams::new(scenario),
            sim: SimKnobs::default(),
            trace_mmu: false,
            trace_trojan: false,
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            timing: Timing {
                mem_access_cycles: self.sim.mem_access_cycles,
                trap_entry_cost: self.sim.trap_entry_cost,
            },
            tlb_enabled: self.sim.tlb_enabled,
            trace_trojan: true,
            trace_mmu: self.trace_mmu,
            probe_range: Some((PROTECTED_BASE, PROTECTED_BASE + PROTECTED_MAPPED)),
            ..SimOptions::default()
        }
    }
}

/// A closed `[on, off)` interval of a trace signal; `off` is absent when
/// the signal was still high at the end of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerInterval {
    pub on: u64,
    pub off: Option<u64>,
}

/// Pairs up rising and falling edges into intervals.
pub fn intervals_from_edges(edges: &[Edge]) -> Vec<TriggerInterval> {
    let mut out = Vec::new();
    let mut open: Option<u64> = None;
    for e in edges {
        match (e.high, open) {
            (true, None) => open = Some(e.cycle),
            (false, Some(on)) => {
                out.push(TriggerInterval {
                    on,
                    off: Some(e.cycle),
                });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(on) = open {
        out.push(TriggerInterval { on, off: None });
    }
    out
}

/// Report of one scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub paper_row: bool,
    pub verdict: Verdict,
    pub expected_verdict: Verdict,
    pub passed: bool,
    pub exit_code: Option<u64>,
    pub total_cycles: u64,
    pub instret: u64,
    pub mode_entries: ModeCounters,
    pub mode_cycles: ModeCounters,
    pub suppressed_faults: u64,
    pub memory_matches_pattern: Option<bool>,
    pub mem_digest: u64,
    pub reg_digest: u64,
    /// Raw-trigger ON/OFF intervals; under preemption these are the
    /// per-slice arming windows.
    pub raw_intervals: Vec<TriggerInterval>,
    pub delivered_intervals: Vec<TriggerInterval>,
    pub fsm_intervals: Vec<TriggerInterval>,
    pub probe_count: usize,
    /// First protected-region store probes (full list via the library API).
    pub probes_head: Vec<StoreProbe>,
}

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("run exceeded the cycle budget ({cycles} cycles) without completing")]
    Timeout { cycles: u64 },
    #[error("sweep fit needs at least 3 points with distinct widths")]
    DegenerateFit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn verdict_of(
    summary: &RunSummary,
    sim: &Simulation,
    expected: &crate::guest::ExpectedOutcome,
) -> (Verdict, Option<bool>) {
    let memory_ok = expected.pattern.map(|(base, len, fill)| {
        sim.machine
            .mem
            .slice(base, len)
            .map(|s| s.chunks(8).all(|c| c == fill.to_le_bytes().as_slice()))
            .unwrap_or(false)
    });
    let suppressed = summary
        .trojan
        .as_ref()
        .map(|t| t.stats.suppressed_faults)
        .unwrap_or(0);
    let verdict = match summary.exit_code {
        Some(EXIT_OK) => {
            let pattern_ok = memory_ok.unwrap_or(true);
            let count_ok = expected.suppressed.map(|n| n == suppressed).unwrap_or(true);
            if pattern_ok && count_ok {
                Verdict::AttackSucceeds
            } else {
                Verdict::Completed
            }
        }
        Some(EXIT_STORE_FAULT) => Verdict::StoreFaults,
        Some(EXIT_PANIC) => Verdict::KernelPanicMarker,
        Some(0) => Verdict::Completed,
        _ => Verdict::Completed,
    };
    (verdict, memory_ok)
}

/// Builds the scenario, runs it to its stop condition and assembles the
/// report. The process exit status contract (nonzero iff verdict differs
/// from expected) is the CLI's job; `passed` carries the comparison.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport, ExpError> {
    let (image, expected) = build_scenario(&cfg.params)?;
    let mut sim = Simulation::new(&image, Some(cfg.params.trojan.clone()), &cfg.sim_options());
    let summary = sim.run(StopCondition::max_cycles(cfg.sim.max_cycles));
    if summary.stop == StopReason::CycleLimit {
        return Err(ExpError::Timeout {
            cycles: summary.total_cycles,
        });
    }
    let (verdict, memory_ok) = verdict_of(&summary, &sim, &expected);
    let trace = summary.trigger_trace.clone().unwrap_or_default();
    let suppressed = summary
        .trojan
        .as_ref()
        .map(|t| t.stats.suppressed_faults)
        .unwrap_or(0);
    Ok(ExperimentReport {
        paper_row: cfg.params.paper_row(),
        verdict,
        expected_verdict: expected.verdict,
        passed: verdict == expected.verdict
            && summary.exit_code == Some(expected.exit_code)
            && memory_ok.unwrap_or(true),
        exit_code: summary.exit_code,
        total_cycles: summary.total_cycles,
        instret: summary.instret,
        mode_entries: summary.mode_entries,
        mode_cycles: summary.mode_cycles,
        suppressed_faults: suppressed,
        memory_matches_pattern: memory_ok,
        mem_digest: summary.mem_digest,
        reg_digest: summary.reg_digest,
        raw_intervals: intervals_from_edges(&trace.raw),
        delivered_intervals: intervals_from_edges(&trace.delivered),
        fsm_intervals: intervals_from_edges(&trace.fsm),
        probe_count: summary.probes.len(),
        probes_head: summary.probes.iter().take(32).copied().collect(),
        config: cfg.clone(),
    })
}

/// Runs a scenario and returns both the simulation (for memory inspection)
/// and the raw summary. Test harness entry point.
pub fn run_scenario_raw(cfg: &RunConfig) -> Result<(Simulation, RunSummary), ExpError> {
    let (image, _) = build_scenario(&cfg.params)?;
    let mut sim = Simulation::new(&image, Some(cfg.params.trojan.clone()), &cfg.sim_options());
    let summary = sim.run(StopCondition::max_cycles(cfg.sim.max_cycles));
    Ok((sim, summary))
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// One measured sweep size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub bits: u32,
    pub instructions: u64,
    pub simulated_cycles: u64,
}

/// Least-squares fit of log2(count) against bits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepFit {
    /// Per-bit growth factor, 2^slope.
    pub g: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals of the log2 fit.
    pub residual: f64,
}

/// Full sweep experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub fit: SweepFit,
    /// Measured cycles per loop iteration at the largest size.
    pub cycles_per_iteration: f64,
    pub target_bits: u32,
    pub frequency_hz: f64,
    pub extrapolated_seconds: f64,
    pub extrapolated_days: f64,
    pub seed: u64,
}

/// Least-squares fit of `log2(count)` vs `bits`.
pub fn fit_sweep(points: &[(u32, u64)]) -> Result<SweepFit, ExpError> {
    if points.len() < 3 {
        return Err(ExpError::DegenerateFit);
    }
    let first = points[0].0;
    if points.iter().all(|(b, _)| *b == first) {
        return Err(ExpError::DegenerateFit);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(b, _)| *b as f64).collect();
    let ys: Vec<f64> = points.iter().map(|(_, c)| (*c as f64).log2()).collect();
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    Ok(SweepFit {
        g: slope.exp2(),
        slope,
        intercept,
        residual,
    })
}

/// Extrapolated wall time for a `bits`-wide sweep at `freq_hz`:
/// `2^(intercept + slope*bits) * cpi / freq`.
pub fn extrapolate(fit: &SweepFit, bits: u32, freq_hz: f64, cpi: f64) -> f64 {
    (fit.intercept + fit.slope * bits as f64).exp2() * cpi / freq_hz
}

/// Runs the sweep sizes and fits the growth factor.
///
/// The comparator width follows the swept size, and the low activation
/// half is placed inside the swept range so every run excites the trigger
/// exactly once.
pub fn run_sweep(
    bits_list: &[u32],
    base: &ScenarioParams,
    knobs: &SimKnobs,
    target_bits: u32,
    frequency_hz: f64,
) -> Result<SweepReport, ExpError> {
    let mut points_full = Vec::new();
    let mut cpi = 1.0;
    for &bits in bits_list {
        let image = build_sweep_loop(bits)?;
        let mut trojan = base.trojan.clone();
        trojan.kind = crate::trojan::TrojanKind::Irt1;
        trojan.comparator_width = bits.min(128);
        trojan.activation.1 = 0xa5; // inside every swept range (bits >= 8)
        let opts = SimOptions {
            timing: Timing {
                mem_access_cycles: knobs.mem_access_cycles,
                trap_entry_cost: knobs.trap_entry_cost,
            },
            tlb_enabled: knobs.tlb_enabled,
            ..SimOptions::default()
        };
        let mut sim = Simulation::new(&image, Some(trojan), &opts);
        let summary = sim.run(StopCondition::max_cycles(knobs.max_cycles));
        if summary.stop == StopReason::CycleLimit {
            return Err(ExpError::Timeout {
                cycles: summary.total_cycles,
            });
        }
        debug_assert_eq!(summary.instret, sweep_expected_instret(&image, bits));
        cpi = summary.total_cycles as f64 / summary.instret as f64;
        points_full.push(SweepPoint {
            bits,
            instructions: summary.instret,
            simulated_cycles: summary.total_cycles,
        });
    }
    let pairs: Vec<(u32, u64)> = points_full
        .iter()
        .map(|p| (p.bits, p.instructions))
        .collect();
    let fit = fit_sweep(&pairs)?;
    let secs = extrapolate(&fit, target_bits, frequency_hz, cpi);
    Ok(SweepReport {
        points: points_full,
        fit,
        cycles_per_iteration: cpi * 5.0,
        target_bits,
        frequency_hz,
        extrapolated_seconds: secs,
        extrapolated_days: secs / 86_400.0,
        seed: base.seed,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Output format of `emit_report`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::AttackSucceeds => "attack_succeeds",
        Verdict::StoreFaults => "store_faults",
        Verdict::KernelPanicMarker => "kernel_panic_marker",
        Verdict::Completed => "completed",
    }
}

/// Serializes scenario reports. The CSV schema mirrors the privilege-count
/// tables: one row per run.
pub fn emit_report(reports: &[ExperimentReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(reports).expect("report serialization"),
        ReportFormat::Csv => {
            let mut out = String::from("kbytes,user,supervisor,machine,suppressed,verdict\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.config.params.kbytes,
                    r.mode_entries.user,
                    r.mode_entries.supervisor,
                    r.mode_entries.machine,
                    r.suppressed_faults,
                    verdict_str(r.verdict),
                ));
            }
            out
        }
    }
}

/// Serializes a sweep report; the CSV carries the measured points.
pub fn emit_sweep(report: &SweepReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serialization"),
        ReportFormat::Csv => {
            let mut out = String::from("bits,instructions,cycles\n");
            for p in &report.points {
                out.push_str(&format!(
                    "{},{},{}\n",
                    p.bits, p.instructions, p.simulated_cycles
                ));
            }
            out
        }
    }
}

/// Check value used by tests and the CLI: seconds in "roughly 9 days".
pub const NINE_DAYS_SECS: f64 = 9.0 * 86_400.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_doubling_fits_g_two() {
        let fit = fit_sweep(&[(8, 2560), (9, 5120), (10, 10240)]).unwrap();
        assert!((fit.g - 2.0).abs() < 1e-12);
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn degenerate_fits_are_rejected() {
        assert!(matches!(
            fit_sweep(&[(8, 100), (8, 100), (8, 100)]),
            Err(ExpError::DegenerateFit)
        ));
        assert!(matches!(
            fit_sweep(&[(8, 100), (9, 200)]),
            Err(ExpError::DegenerateFit)
        ));
    }

    #[test]
    fn extrapolation_formula() {
        let fit = SweepFit {
            g: 2.0,
            slope: 1.0,
            intercept: (5.0f64).log2(),
            residual: 0.0,
        };
        // 5 * 2^48 iterations-worth of instructions at 1 cpi and 1.7 GHz.
        let secs = extrapolate(&fit, 48, 1.7e9, 1.0);
        let expect = 5.0 * (2.0f64).powi(48) / 1.7e9;
        assert!((secs - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn intervals_pair_edges() {
        let edges = vec![
            Edge {
                cycle: 5,
                high: true,
            },
            Edge {
                cycle: 9,
                high: false,
            },
            Edge {
                cycle: 20,
                high: true,
            },
        ];
        let iv = intervals_from_edges(&edges);
        assert_eq!(
            iv,
            vec![
                TriggerInterval {
                    on: 5,
                    off: Some(9)
                },
                TriggerInterval { on: 20, off: None }
            ]
        );
    }

    #[test]
    fn csv_schema_is_stable() {
        let cfg = RunConfig::new(Scenario::Integrity);
        let report = run_experiment(&cfg).unwrap();
        let csv = emit_report(std::slice::from_ref(&report), ReportFormat::Csv);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "kbytes,user,supervisor,machine,suppressed,verdict"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,"), "{row}");
        assert!(row.ends_with("attack_succeeds"), "{row}");
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = RunConfig::new(Scenario::Integrity);
        let a = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_and_csv_agree_on_shared_fields() {
        let cfg = RunConfig::new(Scenario::Integrity);
        let report = run_experiment(&cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&emit_report(std::slice::from_ref(&report), ReportFormat::Json))
                .unwrap();
        let csv = emit_report(std::slice::from_ref(&report), ReportFormat::Csv);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        let entry = &json[0];
        assert_eq!(
            row[1].parse::<u64>().unwrap(),
            entry["mode_entries"]["user"].as_u64().unwrap()
        );
        assert_eq!(
            row[4].parse::<u64>().unwrap(),
            entry["suppressed_faults"].as_u64().unwrap()
        );
    }
}
