//! Train both classifier architectures on a small corpus: A uses
//! max-feature-map competition, B uses squeeze-and-excitation gating.
//!
//! ```bash
//! cargo run --example train_classifiers
//! ```

use advlab::data::{generate_labeled_corpus, CorpusSpec, BINS, FRAMES};
use advlab::models::{raw_examples, train, Architecture, Classifier, InputMode, TrainConfig};

fn main() -> advlab::Result<()> {
    let corpus = generate_labeled_corpus(&CorpusSpec {
        n_train: 120,
        n_dev: 40,
        n_eval: 40,
        seed: 19,
        class_separation: 1.0,
        noise_level: 0.5,
    })?;
    let train_set = raw_examples(&corpus.train);
    let dev_set = raw_examples(&corpus.dev);
    let eval_set = raw_examples(&corpus.eval);

    let schedule = TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr: 0.02,
        momentum: 0.9,
        seed: 42,
    };

    for arch in [Architecture::A, Architecture::B] {
        let mut model =
            Classifier::random_init(arch, InputMode::Raw, [1, FRAMES, BINS], 100 + arch as u64)?;
        println!(
            "architecture {arch} ({}): {} parameters",
            model.model_id(),
            model.params().numel()
        );
        let history = train(&mut model, &train_set, &dev_set, &schedule)?;
        for (epoch, (loss, acc)) in history
            .train_loss
            .iter()
            .zip(&history.dev_accuracy)
            .enumerate()
        {
            println!("  epoch {epoch}: loss {loss:.4}  dev accuracy {acc:.3}");
        }
        println!("  eval accuracy: {:.3}\n", model.accuracy(&eval_set)?);
    }
    Ok(())
}
