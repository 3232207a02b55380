//! Layer noise-to-signal ratios on a toy encoder: perturb inputs with
//! a bounded delta and measure how the relative activation noise
//! changes as it propagates through the layers.
//!
//! ```bash
//! cargo run --example lnsr_demo
//! ```

use advlab::attacks::{AdversarialPair, AttackAlgorithm};
use advlab::data::{generate_unlabeled_corpus, Label, Spectrogram};
use advlab::diagnostics::lnsr;
use advlab::encoder::{EncoderConfig, EncoderModel};
use advlab::seeds::seeded_rng;
use rand::Rng;

fn main() -> advlab::Result<()> {
    let config = EncoderConfig {
        layers: 3,
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        input_dim: 80,
    };
    let encoder = EncoderModel::random_init(&config, 4)?;
    let stack_factor = 2;

    // Synthetic pairs: clean utterances plus a uniform ±ε delta.
    let epsilon = 2.0;
    let clean = generate_unlabeled_corpus(12, 33)?;
    let mut rng = seeded_rng(8, "lnsr-demo");
    let pairs: Vec<AdversarialPair> = clean
        .into_iter()
        .map(|original| {
            let delta = Spectrogram::new(
                original.frames(),
                original.bins(),
                (0..original.values().len())
                    .map(|_| rng.gen_range(-epsilon..epsilon))
                    .collect(),
            )?;
            Ok(AdversarialPair {
                adversarial: original.add(&delta)?,
                original,
                delta,
                label: Label::BonaFide,
                source_model_id: "demo".into(),
                epsilon,
                algorithm: AttackAlgorithm::Pgd,
            })
        })
        .collect::<advlab::Result<_>>()?;

    let report = lnsr(&encoder, stack_factor, &pairs, "demo")?;
    println!(
        "{} over {} pairs ({} layers incl. the stacked input as layer 0):",
        report.attack_summary, report.pair_count, report.layers()
    );
    for (layer, (sum, mean)) in report
        .lnsr_sum
        .iter()
        .zip(report.lnsr_mean())
        .enumerate()
    {
        println!("  layer {layer}: sum {sum:8.4}  per-pair mean {mean:.4}");
    }
    println!("\n(values well below layer 0 mean the layer damps input noise)");
    Ok(())
}
