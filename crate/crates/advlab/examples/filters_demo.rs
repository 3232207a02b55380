//! Smoothing front-ends: apply gaussian, median and mean filters to a
//! spectrogram carrying salt-and-pepper style corruption and compare
//! how much of the damage each one removes.
//!
//! ```bash
//! cargo run --example filters_demo
//! ```

use advlab::data::generate_unlabeled_corpus;
use advlab::defenses::{apply_filter, FilterConfig, FilterKind};
use advlab::seeds::seeded_rng;
use rand::Rng;

fn main() -> advlab::Result<()> {
    let clean = generate_unlabeled_corpus(1, 5)?.remove(0);

    // Corrupt 2% of cells with large spikes.
    let mut rng = seeded_rng(9, "filters-demo");
    let corrupted = {
        let mut values = clean.values().to_vec();
        for v in values.iter_mut() {
            if rng.gen_bool(0.02) {
                *v += if rng.gen_bool(0.5) { 12.0 } else { -12.0 };
            }
        }
        advlab::data::Spectrogram::new(clean.frames(), clean.bins(), values)?
    };

    let rms = |a: &advlab::data::Spectrogram, b: &advlab::data::Spectrogram| {
        let sq: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (sq / a.values().len() as f64).sqrt()
    };
    println!("corruption RMS before filtering: {:.4}\n", rms(&corrupted, &clean));

    for kind in [FilterKind::Gaussian, FilterKind::Median, FilterKind::Mean] {
        for kernel_size in [3, 5] {
            let config = FilterConfig {
                kind,
                kernel_size,
                sigma: 1.0,
            };
            let filtered = apply_filter(&corrupted, &config)?;
            // Error split: how far the filtered image is from the clean
            // one, and how much smoothing distorts an already clean one.
            let recovered = rms(&filtered, &clean);
            let distortion = rms(&apply_filter(&clean, &config)?, &clean);
            println!(
                "{kind:8} k={kernel_size}: residual RMS {recovered:.4}  (clean-input distortion {distortion:.4})"
            );
        }
    }
    Ok(())
}
