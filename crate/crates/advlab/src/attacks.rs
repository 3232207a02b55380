//! L∞-bounded evasion attacks on spectrogram classifiers: the fast
//! gradient-sign method and projected gradient descent.
//!
//! Both attacks perturb the raw spectrogram (never encoder features)
//! and climb the cross-entropy against the true label — untargeted
//! attacks. The perturbation δ is the authoritative artifact: the
//! adversarial example is always reconstructed as `original + delta`,
//! elementwise, so serialized pairs survive a round trip bit-exactly.
//! δ is clamped to the L∞ ball of radius ε but the adversarial values
//! are never clipped to the data's natural range.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::data::{Label, LabeledExample, Spectrogram};
use crate::defenses::Defender;
use crate::error::{LabError, Result};
use crate::models::{Classifier, InputMode};
use crate::seeds;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackAlgorithm {
    Fgsm,
    Pgd,
}

impl fmt::Display for AttackAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackAlgorithm::Fgsm => write!(f, "fgsm"),
            AttackAlgorithm::Pgd => write!(f, "pgd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub algorithm: AttackAlgorithm,
    pub epsilon: f64,
    /// PGD iterations; FGSM ignores this (it is one signed step).
    pub steps: usize,
    /// PGD step size; defaults to ε/4 when absent.
    pub alpha: Option<f64>,
    /// Start PGD from a uniform point inside the ε-ball.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Pgd,
            epsilon: 8.0,
            steps: 10,
            alpha: None,
            random_start: true,
            seed: 42,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(LabError::Config(format!(
                "attack epsilon must be a nonnegative real, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(LabError::Config("attack steps must be ≥ 1".into()));
        }
        if let Some(alpha) = self.alpha {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(LabError::Config(format!(
                    "attack alpha must be a positive real, got {alpha}"
                )));
            }
            if alpha > self.epsilon {
                log::warn!(
                    "attack alpha {alpha} exceeds epsilon {}; steps will saturate the ball",
                    self.epsilon
                );
            }
        }
        Ok(())
    }

    /// Effective PGD step size.
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }
}

/// One attacked example. `delta` is authoritative; `adversarial` is
/// always `original + delta` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPair {
    pub original: Spectrogram,
    pub adversarial: Spectrogram,
    pub delta: Spectrogram,
    pub label: Label,
    pub source_model_id: String,
    pub epsilon: f64,
    pub algorithm: AttackAlgorithm,
}

impl AdversarialPair {
    fn assemble(
        original: Spectrogram,
        delta: Spectrogram,
        label: Label,
        source_model_id: String,
        epsilon: f64,
        algorithm: AttackAlgorithm,
    ) -> Result<Self> {
        let max_abs = delta.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > epsilon + 1e-9 {
            return Err(LabError::Data(format!(
                "perturbation magnitude {max_abs} exceeds epsilon {epsilon}"
            )));
        }
        let adversarial = original.add(&delta)?;
        Ok(AdversarialPair {
            original,
            adversarial,
            delta,
            label,
            source_model_id,
            epsilon,
            algorithm,
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure_raw_model(model: &Classifier) -> Result<()> {
    if model.mode() != InputMode::Raw {
        return Err(LabError::Config(format!(
            "attacks perturb raw spectrograms, but classifier {} consumes encoder features",
            model.model_id()
        )));
    }
    Ok(())
}

/// Shared delta-space loop over an abstract gradient source. FGSM is
/// exactly the `steps=1, alpha=ε, random_start=false` instance, so both
/// algorithms emit bitwise identical perturbations in that
/// configuration by construction.
fn climb_delta(
    grad_at: impl Fn(&[f64]) -> Result<Vec<f64>>,
    base: &[f64],
    epsilon: f64,
    steps: usize,
    alpha: f64,
    random_start: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut delta = vec![0.0; base.len()];
    if epsilon == 0.0 {
        return Ok(delta);
    }
    if random_start {
        let mut rng = seeds::seeded_rng(seed, "attack/random-start");
        for d in &mut delta {
            *d = rng.gen_range(-epsilon..epsilon);
        }
    }
    for _ in 0..steps {
        let adv: Vec<f64> = base.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let grad = grad_at(&adv)?;
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d = (*d + alpha * sign(*g)).clamp(-epsilon, epsilon);
        }
    }
    Ok(delta)
}

fn craft_delta(
    model: &Classifier,
    example: &LabeledExample,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    random_start: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let x = example.spec.to_image_tensor();
    let shape = x.shape().to_vec();
    climb_delta(
        |vals| {
            let adv = crate::tensor::Tensor::new(shape.clone(), vals.to_vec())?;
            Ok(model.loss_input_grad(&adv, example.label)?.1)
        },
        x.data(),
        epsilon,
        steps,
        alpha,
        random_start,
        seed,
    )
}

fn finish(
    model: &Classifier,
    example: &LabeledExample,
    delta: Vec<f64>,
    epsilon: f64,
    algorithm: AttackAlgorithm,
) -> Result<AdversarialPair> {
    let spec = &example.spec;
    let delta = Spectrogram::new(spec.frames(), spec.bins(), delta)?;
    AdversarialPair::assemble(
        spec.clone(),
        delta,
        example.label,
        model.model_id(),
        epsilon,
        algorithm,
    )
}

/// Single signed gradient step: δ = ε·sign(∇ₓ CE(f(x), y)).
pub fn fgsm(model: &Classifier, example: &LabeledExample, epsilon: f64) -> Result<AdversarialPair> {
    ensure_raw_model(model)?;
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(LabError::Config(format!(
            "attack epsilon must be a nonnegative real, got {epsilon}"
        )));
    }
    let delta = craft_delta(model, example, epsilon, 1, epsilon, false, 0)?;
    finish(model, example, delta, epsilon, AttackAlgorithm::Fgsm)
}

/// Iterated signed ascent with projection onto the ε-ball around x.
pub fn pgd(model: &Classifier, example: &LabeledExample, config: &AttackConfig) -> Result<AdversarialPair> {
    pgd_seeded(model, example, config, config.seed)
}

fn pgd_seeded(
    model: &Classifier,
    example: &LabeledExample,
    config: &AttackConfig,
    seed: u64,
) -> Result<AdversarialPair> {
    ensure_raw_model(model)?;
    config.validate()?;
    let delta = craft_delta(
        model,
        example,
        config.epsilon,
        config.steps,
        config.step_size(),
        config.random_start,
        seed,
    )?;
    finish(model, example, delta, config.epsilon, AttackAlgorithm::Pgd)
}

/// Run the configured attack on one example with an explicit seed
/// (FGSM needs none and ignores it).
pub fn attack(
    model: &Classifier,
    example: &LabeledExample,
    config: &AttackConfig,
    seed: u64,
) -> Result<AdversarialPair> {
    match config.algorithm {
        AttackAlgorithm::Fgsm => fgsm(model, example, config.epsilon),
        AttackAlgorithm::Pgd => pgd_seeded(model, example, config, seed),
    }
}

/// White-box attack on a full defended pipeline: the gradient is taken
/// through front-end and classifier jointly, so the perturbation is
/// tuned against the system actually making the prediction rather than
/// transferred from a surrogate. Smoothing front-ends are
/// non-differentiable and are rejected by the defender's gradient.
pub fn attack_defender(
    defender: &Defender,
    example: &LabeledExample,
    config: &AttackConfig,
    seed: u64,
) -> Result<AdversarialPair> {
    config.validate()?;
    let (steps, alpha, random_start) = match config.algorithm {
        AttackAlgorithm::Fgsm => (1, config.epsilon, false),
        AttackAlgorithm::Pgd => (config.steps, config.step_size(), config.random_start),
    };
    let spec = &example.spec;
    let (frames, bins) = (spec.frames(), spec.bins());
    let delta = climb_delta(
        |vals| {
            let adv = Spectrogram::new(frames, bins, vals.to_vec())?;
            Ok(defender.loss_input_grad(&adv, example.label)?.1)
        },
        spec.values(),
        config.epsilon,
        steps,
        alpha,
        random_start,
        seed,
    )?;
    let delta = Spectrogram::new(frames, bins, delta)?;
    AdversarialPair::assemble(
        spec.clone(),
        delta,
        example.label,
        defender.name().to_string(),
        config.epsilon,
        config.algorithm,
    )
}

/// `attack_corpus` against a defended pipeline: one independent
/// white-box attack per example, seeded per index.
pub fn attack_defender_corpus(
    defender: &Defender,
    examples: &[LabeledExample],
    config: &AttackConfig,
) -> Result<Vec<AdversarialPair>> {
    if examples.is_empty() {
        return Err(LabError::Data("cannot attack an empty corpus".into()));
    }
    config.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, example)| {
            attack_defender(defender, example, config, corpus_seed(config.seed, i))
                .map_err(|e| LabError::Data(format!("attack failed on example {i}: {e}")))
        })
        .collect()
}

/// Per-index seed for one example of an attacked corpus.
fn corpus_seed(config_seed: u64, index: usize) -> u64 {
    seeds::derive_seed(
        seeds::derive_seed(config_seed, "attack-corpus"),
        &index.to_string(),
    )
}

/// Attack every example independently. Examples are seeded per index,
/// so the output is identical whether the corpus is processed in
/// parallel or sequentially, and ordering is preserved.
pub fn attack_corpus(
    model: &Classifier,
    examples: &[LabeledExample],
    config: &AttackConfig,
) -> Result<Vec<AdversarialPair>> {
    if examples.is_empty() {
        return Err(LabError::Data("cannot attack an empty corpus".into()));
    }
    ensure_raw_model(model)?;
    config.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, example)| {
            attack(model, example, config, corpus_seed(config.seed, i))
                .map_err(|e| LabError::Data(format!("attack failed on example {i}: {e}")))
        })
        .collect()
}

// ── Pair files ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PairRecord {
    index: usize,
    label: Label,
    #[serde(rename = "source-model-id")]
    source_model_id: String,
    epsilon: f64,
    algorithm: AttackAlgorithm,
    original: Spectrogram,
    delta: Spectrogram,
}

/// Write pairs as JSON Lines. The adversarial spectrogram is not
/// stored; loading reconstructs it from `original + delta`.
pub fn save_pairs(path: &Path, pairs: &[AdversarialPair]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (index, pair) in pairs.iter().enumerate() {
        let record = PairRecord {
            index,
            label: pair.label,
            source_model_id: pair.source_model_id.clone(),
            epsilon: pair.epsilon,
            algorithm: pair.algorithm,
            original: pair.original.clone(),
            delta: pair.delta.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| LabError::json(path, e))?;
        writeln!(out, "{line}").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<AdversarialPair>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line)
            .map_err(|e| LabError::json_line(path, lineno + 1, e))?;
        let pair = AdversarialPair::assemble(
            record.original,
            record.delta,
            record.label,
            record.source_model_id,
            record.epsilon,
            record.algorithm,
        )
        .map_err(|e| LabError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{train, Architecture, TrainConfig};
    use crate::seeds::seeded_rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    const FRAMES: usize = 12;
    const BINS: usize = 10;
    const SHAPE: [usize; 3] = [1, FRAMES, BINS];

    fn toy_example(seed: u64, label: Label) -> LabeledExample {
        let mut rng = seeded_rng(seed, "attacks-test/example");
        let bias = if label == Label::Spoof { 1.0 } else { -1.0 };
        let values = (0..FRAMES * BINS)
            .map(|_| rng.gen_range(-1.0..1.0) + bias)
            .collect();
        LabeledExample {
            spec: Spectrogram::new(FRAMES, BINS, values).unwrap(),
            label,
        }
    }

    fn toy_corpus(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| toy_example(i as u64, Label::from_index(i % 2).unwrap()))
            .collect()
    }

    /// A small trained classifier so gradients are meaningful.
    fn trained_model() -> Classifier {
        let mut model = Classifier::random_init(Architecture::A, InputMode::Raw, SHAPE, 7).unwrap();
        let examples: Vec<(Tensor, Label)> = toy_corpus(24)
            .iter()
            .map(|e| (e.spec.to_image_tensor(), e.label))
            .collect();
        train(
            &mut model,
            &examples,
            &[],
            &TrainConfig {
                epochs: 5,
                batch_size: 8,
                lr: 0.05,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        model
    }

    #[test]
    fn zero_epsilon_is_an_exact_copy() {
        let model = trained_model();
        let example = toy_example(100, Label::Spoof);
        let pair = fgsm(&model, &example, 0.0).unwrap();
        assert!(pair.delta.values().iter().all(|&d| d == 0.0));
        assert_eq!(pair.adversarial.values(), pair.original.values());

        let config = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let pair = pgd(&model, &example, &config).unwrap();
        assert!(pair.delta.values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fgsm_components_are_zero_or_epsilon() {
        let model = trained_model();
        let epsilon = 0.5;
        for i in 0..4 {
            let example = toy_example(200 + i, Label::from_index((i % 2) as usize).unwrap());
            let pair = fgsm(&model, &example, epsilon).unwrap();
            for &d in pair.delta.values() {
                assert!(
                    d == 0.0 || d == epsilon || d == -epsilon,
                    "delta component {d} not in {{0, ±ε}}"
                );
            }
        }
    }

    /// Finite-difference sign oracle: where the loss gradient is
    /// clearly nonzero, the FGSM perturbation must point the same way.
    #[test]
    fn fgsm_direction_matches_finite_difference_signs() {
        let model = trained_model();
        let example = toy_example(300, Label::BonaFide);
        let epsilon = 0.25;
        let pair = fgsm(&model, &example, epsilon).unwrap();

        let loss_at = |values: &[f64]| {
            let t = Tensor::new(SHAPE.to_vec(), values.to_vec()).unwrap();
            model.loss_input_grad(&t, example.label).unwrap().0
        };
        let base = example.spec.values().to_vec();
        let h = 1e-5;
        let mut rng = seeded_rng(1, "attacks-test/coords");
        let mut checked = 0;
        while checked < 15 {
            let i = rng.gen_range(0..base.len());
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            if fd.abs() < 1e-6 {
                continue; // sign too noisy to compare
            }
            let expected = epsilon * fd.signum();
            assert_eq!(
                pair.delta.values()[i], expected,
                "coordinate {i}: fd gradient {fd}"
            );
            checked += 1;
        }
    }

    #[test]
    fn single_step_pgd_equals_fgsm_bitwise() {
        let model = trained_model();
        let epsilon = 1.5;
        let config = AttackConfig {
            algorithm: AttackAlgorithm::Pgd,
            epsilon,
            steps: 1,
            alpha: Some(epsilon),
            random_start: false,
            seed: 9,
        };
        for i in 0..4 {
            let example = toy_example(400 + i, Label::from_index((i % 2) as usize).unwrap());
            let via_pgd = pgd(&model, &example, &config).unwrap();
            let via_fgsm = fgsm(&model, &example, epsilon).unwrap();
            let pgd_bits: Vec<u64> = via_pgd.delta.values().iter().map(|v| v.to_bits()).collect();
            let fgsm_bits: Vec<u64> = via_fgsm
                .delta
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(pgd_bits, fgsm_bits);
            assert_eq!(
                via_pgd.adversarial.values(),
                via_fgsm.adversarial.values()
            );
        }
    }

    #[test]
    fn pgd_stays_inside_the_ball_even_with_oversized_steps() {
        let model = trained_model();
        let example = toy_example(500, Label::Spoof);
        let epsilon = 0.3;
        let config = AttackConfig {
            epsilon,
            steps: 6,
            alpha: Some(2.0 * epsilon), // deliberately oversized
            random_start: true,
            seed: 11,
            ..AttackConfig::default()
        };
        let pair = pgd(&model, &example, &config).unwrap();
        let max = pair
            .delta
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= epsilon + 1e-9, "L∞ violation: {max}");
        // With a step larger than ε most coordinates saturate.
        let saturated = pair
            .delta
            .values()
            .iter()
            .filter(|v| v.abs() == epsilon)
            .count();
        assert!(saturated > pair.delta.values().len() / 2);
    }

    #[test]
    fn projection_is_idempotent_on_feasible_points() {
        let epsilon = 0.7;
        let feasible: [f64; 5] = [-0.7, -0.3, 0.0, 0.42, 0.7];
        for v in feasible {
            assert_eq!(v.clamp(-epsilon, epsilon), v);
        }
    }

    #[test]
    fn features_mode_model_is_rejected() {
        let model =
            Classifier::random_init(Architecture::A, InputMode::Features, SHAPE, 3).unwrap();
        let example = toy_example(0, Label::BonaFide);
        let err = fgsm(&model, &example, 1.0).unwrap_err().to_string();
        assert!(err.contains("encoder features"), "got: {err}");
        assert!(attack_corpus(&model, &[example], &AttackConfig::default()).is_err());
    }

    #[test]
    fn corpus_attack_matches_sequential_run() {
        let model = trained_model();
        let corpus = toy_corpus(6);
        let config = AttackConfig {
            epsilon: 0.4,
            steps: 3,
            seed: 21,
            ..AttackConfig::default()
        };
        let parallel = attack_corpus(&model, &corpus, &config).unwrap();
        let sequential: Vec<AdversarialPair> = corpus
            .iter()
            .enumerate()
            .map(|(i, e)| attack(&model, e, &config, corpus_seed(config.seed, i)).unwrap())
            .collect();
        assert_eq!(parallel, sequential);

        let again = attack_corpus(&model, &corpus, &config).unwrap();
        assert_eq!(parallel, again);
    }

    #[test]
    fn pair_files_round_trip_bit_exactly() {
        let model = trained_model();
        let corpus = toy_corpus(4);
        let config = AttackConfig {
            epsilon: 0.6,
            steps: 2,
            seed: 33,
            ..AttackConfig::default()
        };
        let pairs = attack_corpus(&model, &corpus, &config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&path, &pairs).unwrap();
        let loaded = load_pairs(&path).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&loaded) {
            assert_eq!(a, b);
            let bits_a: Vec<u64> = a
                .adversarial
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let bits_b: Vec<u64> = b
                .adversarial
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits_a, bits_b, "reconstruction not bit-exact");
        }
    }

    #[test]
    fn load_reports_line_context_on_malformed_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"index\": 0}\n").unwrap();
        let err = load_pairs(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "got: {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Any PGD configuration keeps the perturbation feasible.
        #[test]
        fn pgd_always_respects_the_ball(
            epsilon in 0.01f64..2.0,
            steps in 1usize..4,
            oversize in proptest::bool::ANY,
            random_start in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let model =
                Classifier::random_init(Architecture::B, InputMode::Raw, SHAPE, 5).unwrap();
            let example = toy_example(seed, Label::Spoof);
            let config = AttackConfig {
                algorithm: AttackAlgorithm::Pgd,
                epsilon,
                steps,
                alpha: oversize.then_some(1.5 * epsilon),
                random_start,
                seed,
            };
            let pair = pgd(&model, &example, &config).unwrap();
            let max = pair.delta.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(max <= epsilon + 1e-9);
        }
    }
}
