//! Layer-wise noise diagnostics and accuracy-vs-ε robustness curves.
//!
//! The layer noise-to-signal ratio of layer i over N pairs is
//!
//! ```text
//! LNSR_i = Σₙ ‖ĥᵢⁿ − hᵢⁿ‖₂ / ‖hᵢⁿ‖₂
//! ```
//!
//! where hᵢⁿ and ĥᵢⁿ are the encoder's layer-i outputs (flattened) for
//! the original and adversarial spectrograms of pair n, and layer 0 is
//! the stacked-frame input itself. The raw sum is the authoritative
//! value; a per-pair mean (sum/N) is reported alongside it for
//! comparisons across differently sized pair sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::attacks::{attack_corpus, AdversarialPair, AttackAlgorithm, AttackConfig};
use crate::data::LabeledExample;
use crate::defenses::Defender;
use crate::encoder::EncoderModel;
use crate::error::{LabError, Result};
use crate::models::{Architecture, Classifier};
use crate::seeds;
use crate::tensor::Tensor;

// ── LNSR ────────────────────────────────────────────────────────────

/// Per-layer noise-to-signal ratios for one encoder over one pair set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnsrReport {
    /// Which encoder arm produced the states (e.g. `"mock"`).
    pub model_id: String,
    /// Attack that generated the pairs (e.g. `"pgd eps=8"`).
    pub attack_summary: String,
    /// Raw Eq-style sums, one per layer 0…K.
    pub lnsr_sum: Vec<f64>,
    pub pair_count: usize,
}

impl LnsrReport {
    /// Per-pair means, sum/N per layer.
    pub fn lnsr_mean(&self) -> Vec<f64> {
        self.lnsr_sum
            .iter()
            .map(|s| s / self.pair_count as f64)
            .collect()
    }

    /// Number of layers including layer 0.
    pub fn layers(&self) -> usize {
        self.lnsr_sum.len()
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn layer_ratios(
    encoder: &EncoderModel,
    stack_factor: usize,
    pair_index: usize,
    pair: &AdversarialPair,
) -> Result<Vec<f64>> {
    let clean: Vec<Tensor> = encoder.encode(&pair.original, stack_factor)?;
    let noisy: Vec<Tensor> = encoder.encode(&pair.adversarial, stack_factor)?;
    clean
        .iter()
        .zip(&noisy)
        .enumerate()
        .map(|(layer, (h, h_hat))| {
            let signal = l2(h.data());
            if signal == 0.0 {
                return Err(LabError::Data(format!(
                    "pair {pair_index}: layer {layer} has zero signal norm"
                )));
            }
            let noise: Vec<f64> = h_hat
                .data()
                .iter()
                .zip(h.data())
                .map(|(a, b)| a - b)
                .collect();
            Ok(l2(&noise) / signal)
        })
        .collect()
}

/// Compute the per-layer report for one encoder. Pairs are processed
/// in parallel but summed in pair order, so the result is independent
/// of thread count.
pub fn lnsr(
    encoder: &EncoderModel,
    stack_factor: usize,
    pairs: &[AdversarialPair],
    model_id: &str,
) -> Result<LnsrReport> {
    if pairs.is_empty() {
        return Err(LabError::Data("lnsr requires at least one pair".into()));
    }
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .enumerate()
        .map(|(n, pair)| layer_ratios(encoder, stack_factor, n, pair))
        .collect::<Result<_>>()?;
    let layers = per_pair[0].len();
    let mut lnsr_sum = vec![0.0; layers];
    for ratios in &per_pair {
        for (slot, r) in lnsr_sum.iter_mut().zip(ratios) {
            *slot += r;
        }
    }
    let first = &pairs[0];
    Ok(LnsrReport {
        model_id: model_id.to_string(),
        attack_summary: format!("{} eps={}", first.algorithm, first.epsilon),
        lnsr_sum,
        pair_count: pairs.len(),
    })
}

/// One row of the long-format LNSR table / CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnsrRow {
    pub layer: usize,
    pub arm: String,
    pub epsilon: f64,
    pub lnsr_sum: f64,
    pub lnsr_mean: f64,
    pub n: usize,
}

/// Compare a pretrained and a random-init encoder on shared pair sets,
/// one per ε. Emits rows ordered arm → ε → layer.
pub fn lnsr_comparison(
    pretrained: &EncoderModel,
    random_init: &EncoderModel,
    stack_factor: usize,
    pairs_by_eps: &[(f64, &[AdversarialPair])],
) -> Result<Vec<LnsrRow>> {
    if pretrained.config() != random_init.config() {
        return Err(LabError::Config(
            "lnsr comparison requires encoders with identical configs".into(),
        ));
    }
    if pairs_by_eps.is_empty() {
        return Err(LabError::Data("lnsr comparison needs at least one ε".into()));
    }
    let mut rows = Vec::new();
    for (arm, encoder) in [("mock", pretrained), ("rand", random_init)] {
        for (epsilon, pairs) in pairs_by_eps {
            let report = lnsr(encoder, stack_factor, pairs, arm)?;
            let means = report.lnsr_mean();
            for (layer, (&sum, &mean)) in report.lnsr_sum.iter().zip(&means).enumerate() {
                rows.push(LnsrRow {
                    layer,
                    arm: arm.to_string(),
                    epsilon: *epsilon,
                    lnsr_sum: sum,
                    lnsr_mean: mean,
                    n: report.pair_count,
                });
            }
        }
    }
    Ok(rows)
}

// ── Robustness curves ───────────────────────────────────────────────

/// Accuracy of one defender as the attack budget grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub defender: String,
    pub algorithm: AttackAlgorithm,
    /// Accuracy on the unattacked eval set (the ε=0 point).
    pub clean_accuracy: f64,
    /// (ε, accuracy) with strictly increasing ε > 0.
    pub points: Vec<(f64, f64)>,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub algorithms: Vec<AttackAlgorithm>,
    /// Strictly increasing positive budgets; ε=0 is always evaluated
    /// separately as the clean point.
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            algorithms: vec![AttackAlgorithm::Fgsm, AttackAlgorithm::Pgd],
            epsilons: vec![0.1, 1.0, 2.0, 4.0, 8.0, 16.0],
            steps: 10,
            alpha: None,
            random_start: true,
            seed: 42,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() || self.epsilons.is_empty() {
            return Err(LabError::Config(
                "sweep needs at least one algorithm and one ε".into(),
            ));
        }
        if self.epsilons[0] <= 0.0
            || self.epsilons.windows(2).any(|w| w[0] >= w[1])
            || self.epsilons.iter().any(|e| !e.is_finite())
        {
            return Err(LabError::Config(format!(
                "sweep ε values must be positive and strictly increasing, got {:?}",
                self.epsilons
            )));
        }
        if self.steps == 0 {
            return Err(LabError::Config("sweep steps must be ≥ 1".into()));
        }
        Ok(())
    }

    fn cell_config(&self, algorithm: AttackAlgorithm, epsilon: f64) -> AttackConfig {
        AttackConfig {
            algorithm,
            epsilon,
            steps: self.steps,
            alpha: self.alpha,
            random_start: self.random_start,
            seed: seeds::derive_seed(self.seed, &format!("sweep/{algorithm}/{epsilon}")),
        }
    }
}

fn ensure_black_box(defenders: &[&Defender], attacker_arch: Architecture) -> Result<()> {
    for defender in defenders {
        if defender.classifier().arch() == attacker_arch {
            return Err(LabError::Config(format!(
                "defender '{}' shares architecture {} with the attacking model; \
                 the transfer evaluation must be black-box",
                defender.name(),
                attacker_arch
            )));
        }
    }
    Ok(())
}

/// Accuracy of a defender on the adversarial side of a pair set.
pub fn adversarial_accuracy(defender: &Defender, pairs: &[AdversarialPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LabError::Data(
            "cannot measure accuracy on an empty pair set".into(),
        ));
    }
    let correct: usize = pairs
        .par_iter()
        .map(|pair| {
            defender
                .predict(&pair.adversarial)
                .map(|(_, label)| usize::from(label == pair.label))
        })
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / pairs.len() as f64)
}

/// Build curves from already-generated pair sets, one per
/// (algorithm, ε) cell. Every defender is scored on the same shared
/// pairs, which is what makes the curves comparable.
pub fn curves_from_pairs(
    defenders: &[&Defender],
    attacker_arch: Architecture,
    eval: &[LabeledExample],
    cells: &[(AttackAlgorithm, f64, Vec<AdversarialPair>)],
) -> Result<Vec<RobustnessCurve>> {
    if defenders.is_empty() {
        return Err(LabError::Data("no defenders to evaluate".into()));
    }
    ensure_black_box(defenders, attacker_arch)?;

    let clean: Vec<f64> = defenders
        .iter()
        .map(|d| d.clean_accuracy(eval))
        .collect::<Result<_>>()?;

    let mut algorithms: Vec<AttackAlgorithm> = Vec::new();
    for (algo, _, _) in cells {
        if !algorithms.contains(algo) {
            algorithms.push(*algo);
        }
    }

    let mut curves = Vec::new();
    for (d, defender) in defenders.iter().enumerate() {
        for &algorithm in &algorithms {
            let mut points: Vec<(f64, f64)> = Vec::new();
            for (algo, epsilon, pairs) in cells {
                if *algo != algorithm {
                    continue;
                }
                points.push((*epsilon, adversarial_accuracy(defender, pairs)?));
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(LabError::Config(format!(
                    "duplicate ε value in sweep cells for algorithm {algorithm}"
                )));
            }
            curves.push(RobustnessCurve {
                defender: defender.name().to_string(),
                algorithm,
                clean_accuracy: clean[d],
                points,
                n_examples: eval.len(),
            });
        }
    }
    Ok(curves)
}

/// Full transfer sweep: craft one adversarial set per (algorithm, ε)
/// against the attacking model, then score every defender on it. The
/// attacking model's architecture must differ from every defender's
/// classifier (black-box transfer).
pub fn robustness_sweep(
    defenders: &[&Defender],
    attacker: &Classifier,
    eval: &[LabeledExample],
    config: &SweepConfig,
) -> Result<Vec<RobustnessCurve>> {
    config.validate()?;
    if eval.is_empty() {
        return Err(LabError::Data("sweep requires a non-empty eval set".into()));
    }
    ensure_black_box(defenders, attacker.arch())?;
    let mut cells = Vec::new();
    for &algorithm in &config.algorithms {
        for &epsilon in &config.epsilons {
            let cell = config.cell_config(algorithm, epsilon);
            cells.push((algorithm, epsilon, attack_corpus(attacker, eval, &cell)?));
        }
    }
    curves_from_pairs(defenders, attacker.arch(), eval, &cells)
}

// ── CSV output ──────────────────────────────────────────────────────

pub const LNSR_HEADER: &str = "layer,arm,epsilon,lnsr_sum,lnsr_mean,n";
pub const CURVES_HEADER: &str = "defender,algorithm,epsilon,accuracy,n_examples";

/// Write the long-format LNSR table. Values use the shortest exact
/// decimal representation, so identical runs produce identical bytes.
pub fn write_lnsr_csv(path: &Path, rows: &[LnsrRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(LNSR_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.layer, row.arm, row.epsilon, row.lnsr_sum, row.lnsr_mean, row.n
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_curves_csv(path: &Path, curves: &[RobustnessCurve]) -> Result<()> {
    let mut out = String::new();
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for curve in curves {
        out.push_str(&format!(
            "{},{},0,{},{}\n",
            curve.defender, curve.algorithm, curve.clean_accuracy, curve.n_examples
        ));
        for (epsilon, accuracy) in &curve.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                curve.defender, curve.algorithm, epsilon, accuracy, curve.n_examples
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    file.write_all(bytes).map_err(|e| LabError::io(path, e))?;
    file.flush().map_err(|e| LabError::io(path, e))
}
