//! Pre-train a small encoder on masked reconstruction and watch the
//! held-out L1 error drop below an untrained twin's.
//!
//! ```bash
//! cargo run --example pretrain_small
//! ```

use advlab::data::generate_unlabeled_corpus;
use advlab::encoder::{pretrain, EncoderConfig, EncoderModel, MaskingPolicy, PretrainConfig};

fn main() -> advlab::Result<()> {
    let config = EncoderConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        input_dim: 80,
    };
    let policy = MaskingPolicy::default();
    let train = generate_unlabeled_corpus(48, 21)?;
    let held_out = generate_unlabeled_corpus(16, 22)?;

    let mut model = EncoderModel::random_init(&config, 5)?;
    let untrained = EncoderModel::random_init(&config, 5)?;

    let schedule = PretrainConfig {
        epochs: 4,
        batch_size: 8,
        lr: 0.05,
        momentum: 0.9,
        masked_only: false,
        seed: 42,
    };
    let losses = pretrain(&mut model, &train, &policy, &schedule)?;
    for (epoch, loss) in losses.iter().enumerate() {
        println!("epoch {epoch}: train reconstruction L1 = {loss:.4}");
    }

    let before = untrained.reconstruction_l1(&held_out, &policy, 77, true)?;
    let after = model.reconstruction_l1(&held_out, &policy, 77, true)?;
    println!("\nheld-out masked-step L1:");
    println!("  untrained encoder: {before:.4}");
    println!("  pretrained encoder: {after:.4}");
    println!(
        "  improvement: {:.1}%",
        100.0 * (before - after) / before
    );
    Ok(())
}
