//! Miniature end-to-end defense comparison: pre-train an encoder,
//! build the defender suite for one architecture, attack with the
//! other architecture, and print accuracy as the budget grows.
//!
//! This is a scaled-down version of what `lab all` runs; expect a
//! minute or so of training.
//!
//! ```bash
//! cargo run --example transfer_suite
//! ```

use advlab::data::{generate_labeled_corpus, generate_unlabeled_corpus, CorpusSpec};
use advlab::defenses::{build_defender_suite, Defender, SuiteConfig};
use advlab::diagnostics::{robustness_sweep, SweepConfig};
use advlab::encoder::{pretrain, EncoderConfig, EncoderModel, MaskingPolicy, PretrainConfig};
use advlab::models::{Architecture, TrainConfig};

fn main() -> advlab::Result<()> {
    let corpus = generate_labeled_corpus(&CorpusSpec {
        n_train: 200,
        n_dev: 40,
        n_eval: 40,
        seed: 3,
        class_separation: 1.0,
        noise_level: 0.5,
    })?;
    let unlabeled = generate_unlabeled_corpus(100, 4)?;

    // Small encoder so the demo stays fast.
    let encoder_config = EncoderConfig {
        layers: 2,
        model_dim: 32,
        heads: 4,
        ff_dim: 64,
        input_dim: 80,
    };
    let mut encoder = EncoderModel::random_init(&encoder_config, 10)?;
    println!("pre-training the encoder…");
    pretrain(
        &mut encoder,
        &unlabeled,
        &MaskingPolicy::default(),
        &PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
    )?;

    println!("building the defender suite…");
    let suite = build_defender_suite(
        &corpus.train,
        &corpus.dev,
        &encoder,
        &SuiteConfig {
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            scratch_epochs: 7,
            stack_factor: 2,
            seed: 42,
        },
    )?;

    // Attack architecture B's defenders with architecture A's basic
    // model (the A-mel classifier) — a black-box transfer.
    let attacker = suite
        .get("A-mel")
        .expect("suite always contains A-mel")
        .classifier()
        .clone();
    let targets: Vec<&Defender> = suite
        .defenders
        .iter()
        .filter(|d| d.classifier().arch() == Architecture::B)
        .collect();
    let sweep = SweepConfig {
        epsilons: vec![2.0, 8.0],
        steps: 5,
        ..SweepConfig::default()
    };
    println!("running the transfer sweep…\n");
    let curves = robustness_sweep(&targets, &attacker, &corpus.eval, &sweep)?;

    println!("{:>10}  {:>5}  {:>6}  {:>6}  {:>6}", "defender", "algo", "ε=0", "ε=2", "ε=8");
    for curve in &curves {
        println!(
            "{:>10}  {:>5}  {:6.3}  {:6.3}  {:6.3}",
            curve.defender, curve.algorithm.to_string(), curve.clean_accuracy,
            curve.points[0].1, curve.points[1].1
        );
    }
    Ok(())
}
