//! Visualize the masked-prediction corruption policy: stack frames
//! into steps, select ~15% of steps in contiguous segments, then
//! zero / randomize / keep them with probabilities 0.8 / 0.1 / 0.1.
//!
//! ```bash
//! cargo run --example masking_demo
//! ```

use advlab::data::{generate_unlabeled_corpus, BINS};
use advlab::encoder::{apply_masking, stack_frames, MaskCase, MaskingPolicy};

fn main() -> advlab::Result<()> {
    let policy = MaskingPolicy::default();
    let spec = &generate_unlabeled_corpus(1, 3)?[0];
    let seq = stack_frames(spec, policy.stack_factor)?;
    println!(
        "utterance: {} frames × {BINS} bins → {} steps × {} dims (stack factor {})",
        spec.frames(),
        seq.steps(),
        seq.dim(),
        policy.stack_factor
    );

    // A few different seeds, same utterance.
    for seed in 0..4u64 {
        let outcome = apply_masking(&seq, &policy, seed)?;
        let row: String = outcome
            .mask
            .iter()
            .map(|&m| if m { '#' } else { '.' })
            .collect();
        println!("seed {seed}: {row}  case {:?}", outcome.cases);
    }

    // Aggregate case statistics over many utterances.
    let corpus = generate_unlabeled_corpus(400, 11)?;
    let mut counts = [0usize; 3];
    let mut selected = 0usize;
    let mut steps = 0usize;
    for (i, spec) in corpus.iter().enumerate() {
        let seq = stack_frames(spec, policy.stack_factor)?;
        let outcome = apply_masking(&seq, &policy, i as u64)?;
        for case in &outcome.cases {
            counts[match case {
                MaskCase::Zero => 0,
                MaskCase::Random => 1,
                MaskCase::Keep => 2,
            }] += 1;
        }
        selected += outcome.mask.iter().filter(|&&m| m).count();
        steps += seq.steps();
    }
    let total: usize = counts.iter().sum();
    println!("\nover {} utterances:", corpus.len());
    println!(
        "  selected fraction: {:.4} (policy target {:.4} after ceil-rounding)",
        selected as f64 / steps as f64,
        policy.select_rate
    );
    println!(
        "  case frequencies: zero {:.3}  random {:.3}  keep {:.3}",
        counts[0] as f64 / total as f64,
        counts[1] as f64 / total as f64,
        counts[2] as f64 / total as f64
    );
    Ok(())
}
