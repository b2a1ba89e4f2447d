//! Signal- and transition-probability estimation for trigger gate trees.
//!
//! Exact computation assumes mutually independent inputs, both across
//! inputs and across cycles; that independence is a model assumption, not a
//! measured property. The Monte Carlo estimator exists to validate the
//! closed forms and is deterministic for a given seed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gate kinds of a trigger tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    And,
    Nand,
    Or,
    Nor,
    Xor,
}

/// A tree-structured gate network; inputs carry their own 1-probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GateNode {
    Input { prob: f64 },
    Gate { kind: GateKind, children: Vec<GateNode> },
}

impl GateNode {
    pub fn input(prob: f64) -> Self {
        GateNode::Input { prob }
    }

    pub fn gate(kind: GateKind, children: Vec<GateNode>) -> Self {
        GateNode::Gate { kind, children }
    }

    pub fn num_inputs(&self) -> usize {
        match self {
            GateNode::Input { .. } => 1,
            GateNode::Gate { children, .. } => children.iter().map(|c| c.num_inputs()).sum(),
        }
    }

    fn eval(&self, inputs: &[bool], next: &mut usize) -> bool {
        match self {
            GateNode::Input { .. } => {
                let v = inputs[*next];
                *next += 1;
                v
            }
            GateNode::Gate { kind, children } => {
                let values: Vec<bool> = children.iter().map(|c| c.eval(inputs, next)).collect();
                match kind {
                    GateKind::And => values.iter().all(|v| *v),
                    GateKind::Nand => !values.iter().all(|v| *v),
                    GateKind::Or => values.iter().any(|v| *v),
                    GateKind::Nor => !values.iter().any(|v| *v),
                    GateKind::Xor => values.iter().filter(|v| **v).count() % 2 == 1,
                }
            }
        }
    }

    /// Evaluates the tree on a flat input assignment (leaf order).
    pub fn eval_assignment(&self, inputs: &[bool]) -> bool {
        let mut next = 0;
        self.eval(inputs, &mut next)
    }

    fn input_probs(&self, out: &mut Vec<f64>) {
        match self {
            GateNode::Input { prob } => out.push(*prob),
            GateNode::Gate { children, .. } => {
                for c in children {
                    c.input_probs(out);
                }
            }
        }
    }
}

/// Exact output 1-probability under input independence.
///
/// AND is the product, OR/NOR complement products, XOR folds the pairwise
/// convolution `p (+) q = p(1-q) + q(1-p)`.
pub fn signal_prob(node: &GateNode) -> f64 {
    match node {
        GateNode::Input { prob } => *prob,
        GateNode::Gate { kind, children } => {
            let probs: Vec<f64> = children.iter().map(signal_prob).collect();
            match kind {
                GateKind::And => probs.iter().product(),
                GateKind::Nand => 1.0 - probs.iter().product::<f64>(),
                GateKind::Or => 1.0 - probs.iter().map(|p| 1.0 - p).product::<f64>(),
                GateKind::Nor => probs.iter().map(|p| 1.0 - p).product(),
                GateKind::Xor => probs
                    .iter()
                    .copied()
                    .fold(0.0, |acc, p| acc * (1.0 - p) + p * (1.0 - acc)),
            }
        }
    }
}

/// Transition probability of a signal with 1-probability `p` under temporal
/// independence: 2p(1-p).
pub fn transition_prob(p: f64) -> f64 {
    2.0 * p * (1.0 - p)
}

/// Activation probability of a `c`-bit exact-match comparator fed uniform
/// random host bits: 2^-c, exact in binary floating point.
pub fn comparator_activation_prob(width: u32) -> f64 {
    assert!((1..=128).contains(&width), "width must be 1..=128");
    2.0f64.powi(-(width as i32))
}

/// log2 of the comparator activation probability (exact).
pub fn comparator_activation_log2(width: u32) -> i32 {
    assert!((1..=128).contains(&width), "width must be 1..=128");
    -(width as i32)
}

/// Monte Carlo validation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbReport {
    pub signal_prob: f64,
    pub transition_prob: f64,
    pub mc_estimate: f64,
    pub mc_transition_estimate: f64,
    pub mc_samples: u64,
    pub seed: u64,
}

/// Samples the tree `samples` times with independent per-cycle input draws.
///
/// Also estimates the transition frequency from consecutive samples, which
/// is exactly the temporal-independence model the closed form assumes.
pub fn monte_carlo(node: &GateNode, samples: u64, seed: u64) -> ProbReport {
    assert!(samples >= 1, "samples must be >= 1");
    let mut probs = Vec::new();
    node.input_probs(&mut probs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |p: f64| -> bool {
        // 53-bit uniform in [0, 1).
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u < p
    };

    let mut ones = 0u64;
    let mut transitions = 0u64;
    let mut prev = None;
    let mut inputs = vec![false; probs.len()];
    for _ in 0..samples {
        for (slot, p) in inputs.iter_mut().zip(&probs) {
            *slot = draw(*p);
        }
        let out = node.eval_assignment(&inputs);
        if out {
            ones += 1;
        }
        if let Some(prev) = prev {
            if prev != out {
                transitions += 1;
            }
        }
        prev = Some(out);
    }

    let p = signal_prob(node);
    ProbReport {
        signal_prob: p,
        transition_prob: transition_prob(p),
        mc_estimate: ones as f64 / samples as f64,
        mc_transition_estimate: if samples > 1 {
            transitions as f64 / (samples - 1) as f64
        } else {
            0.0
        },
        mc_samples: samples,
        seed,
    }
}

/// The AND->NAND pattern: two 2-input ANDs feeding a NAND, all inputs at
/// probability `p`.
pub fn and_nand_pattern(p: f64) -> GateNode {
    GateNode::gate(
        GateKind::Nand,
        vec![
            GateNode::gate(GateKind::And, vec![GateNode::input(p), GateNode::input(p)]),
            GateNode::gate(GateKind::And, vec![GateNode::input(p), GateNode::input(p)]),
        ],
    )
}

/// The NAND->NOR pattern: two 2-input NANDs feeding a NOR.
pub fn nand_nor_pattern(p: f64) -> GateNode {
    GateNode::gate(
        GateKind::Nor,
        vec![
            GateNode::gate(GateKind::Nand, vec![GateNode::input(p), GateNode::input(p)]),
            GateNode::gate(GateKind::Nand, vec![GateNode::input(p), GateNode::input(p)]),
        ],
    )
}

/// A `width`-bit exact-match comparator as an AND of per-bit match signals,
/// each 1 with probability 0.5 under uniform host bits.
pub fn comparator_tree(width: u32) -> GateNode {
    GateNode::gate(
        GateKind::And,
        (0..width).map(|_| GateNode::input(0.5)).collect(),
    )
}

/// Exhaustive satisfying-assignment count over all `2^n` inputs; the
/// independent oracle for `signal_prob` at p = 0.5.
pub fn enumerate_prob(node: &GateNode) -> f64 {
    let n = node.num_inputs();
    assert!(n <= 24, "enumeration limited to 24 inputs");
    let mut count = 0u64;
    let mut inputs = vec![false; n];
    for bits in 0u64..(1 << n) {
        for (i, slot) in inputs.iter_mut().enumerate() {
            *slot = (bits >> i) & 1 == 1;
        }
        if node.eval_assignment(&inputs) {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn and_of_halves_is_quarter() {
        let node = GateNode::gate(
            GateKind::And,
            vec![GateNode::input(0.5), GateNode::input(0.5)],
        );
        assert_eq!(signal_prob(&node), 0.25);
        assert_eq!(enumerate_prob(&node), 0.25);
    }

    #[test]
    fn nand_nor_matches_truth_table() {
        let node = nand_nor_pattern(0.5);
        // NOR(NAND(a,b), NAND(c,d)) = a&b&c&d: 1/16 = 0.0625.
        assert_eq!(signal_prob(&node), 0.0625);
        assert_eq!(enumerate_prob(&node), 0.0625);
    }

    #[test]
    fn and_nand_matches_truth_table() {
        let node = and_nand_pattern(0.5);
        assert_eq!(signal_prob(&node), enumerate_prob(&node));
        assert_eq!(signal_prob(&node), 0.9375);
    }

    #[test]
    fn transition_prob_closed_form() {
        assert_eq!(transition_prob(0.5), 0.5);
        assert_eq!(transition_prob(0.0625), 0.1171875);
        assert_eq!(transition_prob(0.0), 0.0);
    }

    #[test]
    fn comparator_probability_is_dyadic() {
        assert_eq!(comparator_activation_prob(1), 0.5);
        assert_eq!(comparator_activation_prob(8), 1.0 / 256.0);
        assert_eq!(comparator_activation_log2(128), -128);
        assert_eq!(comparator_activation_prob(128), (2.0f64).powi(-128));
        // Halves per added bit.
        for c in 1..64 {
            assert_eq!(
                comparator_activation_prob(c + 1) * 2.0,
                comparator_activation_prob(c)
            );
        }
    }

    #[test]
    fn comparator_tree_matches_closed_form() {
        for c in [1u32, 4, 8] {
            let tree = comparator_tree(c);
            assert_eq!(signal_prob(&tree), comparator_activation_prob(c));
            assert_eq!(enumerate_prob(&tree), comparator_activation_prob(c));
        }
    }

    #[test]
    fn xor_convolution_matches_enumeration() {
        let node = GateNode::gate(
            GateKind::Xor,
            vec![
                GateNode::input(0.5),
                GateNode::input(0.5),
                GateNode::input(0.5),
            ],
        );
        assert_eq!(signal_prob(&node), enumerate_prob(&node));
    }

    #[test]
    fn monte_carlo_is_deterministic_and_converges() {
        let node = nand_nor_pattern(0.5);
        let a = monte_carlo(&node, 100_000, 7);
        let b = monte_carlo(&node, 100_000, 7);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // 3-sigma binomial bound around 0.0625.
        let sigma = (0.0625f64 * (1.0 - 0.0625) / 100_000.0).sqrt();
        assert!((a.mc_estimate - 0.0625).abs() < 3.0 * sigma);
    }

    #[test]
    fn random_trees_match_enumeration() {
        // Deterministic pseudo-random tree generator over <= 12 inputs at
        // p = 0.5; enumeration is the oracle.
        fn build(rng: &mut impl RngCore, budget: &mut u32, depth: u32) -> GateNode {
            if *budget == 0 || depth > 3 || rng.next_u32() % 4 == 0 {
                *budget = budget.saturating_sub(1);
                return GateNode::input(0.5);
            }
            let kind = match rng.next_u32() % 5 {
                0 => GateKind::And,
                1 => GateKind::Nand,
                2 => GateKind::Or,
                3 => GateKind::Nor,
                _ => GateKind::Xor,
            };
            let arity = 2 + (rng.next_u32() % 2) as usize;
            let children = (0..arity).map(|_| build(rng, budget, depth + 1)).collect();
            GateNode::gate(kind, children)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mut budget = 12;
            let tree = build(&mut rng, &mut budget, 0);
            if tree.num_inputs() > 12 {
                continue;
            }
            let exact = signal_prob(&tree);
            let enumerated = enumerate_prob(&tree);
            assert!(
                (exact - enumerated).abs() < 1e-12,
                "exact {exact} vs enumerated {enumerated}"
            );
        }
    }
}
