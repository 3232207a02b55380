//! Craft FGSM and PGD perturbations against a quickly trained
//! classifier and compare their strength at the same L∞ budget.
//!
//! ```bash
//! cargo run --example attack_models
//! ```

use advlab::attacks::{attack_corpus, AttackAlgorithm, AttackConfig};
use advlab::data::{generate_labeled_corpus, CorpusSpec, BINS, FRAMES};
use advlab::models::{raw_examples, train, Architecture, Classifier, InputMode, TrainConfig};

fn main() -> advlab::Result<()> {
    let corpus = generate_labeled_corpus(&CorpusSpec {
        n_train: 160,
        n_dev: 40,
        n_eval: 24,
        seed: 29,
        class_separation: 1.0,
        noise_level: 0.5,
    })?;
    let mut model =
        Classifier::random_init(Architecture::A, InputMode::Raw, [1, FRAMES, BINS], 1)?;
    train(
        &mut model,
        &raw_examples(&corpus.train),
        &raw_examples(&corpus.dev),
        &TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        },
    )?;
    println!(
        "clean eval accuracy: {:.3}",
        model.accuracy(&raw_examples(&corpus.eval))?
    );

    for epsilon in [1.0, 4.0, 8.0] {
        for algorithm in [AttackAlgorithm::Fgsm, AttackAlgorithm::Pgd] {
            let config = AttackConfig {
                algorithm,
                epsilon,
                steps: 10,
                alpha: None, // ε/4 per iteration
                random_start: true,
                seed: 42,
            };
            let pairs = attack_corpus(&model, &corpus.eval, &config)?;
            let correct = pairs
                .iter()
                .map(|p| {
                    Ok(usize::from(
                        model.predict(&p.adversarial.to_image_tensor())? == p.label,
                    ))
                })
                .sum::<advlab::Result<usize>>()?;
            let linf = pairs
                .iter()
                .flat_map(|p| p.delta.values())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            println!(
                "{algorithm:4}  ε={epsilon:4}  accuracy {:.3}  max‖δ‖∞ {linf:.3}",
                correct as f64 / pairs.len() as f64
            );
        }
    }
    Ok(())
}
