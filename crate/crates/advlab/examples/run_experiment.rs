//! Drive the staged experiment harness as a library: the same stages
//! the `lab` binary exposes, on a tiny configuration, with manifest
//! skip-on-rerun behaviour shown explicitly.
//!
//! ```bash
//! cargo run --example run_experiment
//! ```

use advlab::diagnostics::SweepConfig;
use advlab::encoder::EncoderConfig;
use advlab::harness::{ExperimentConfig, Lab};

fn main() -> advlab::Result<()> {
    let dir = std::env::temp_dir().join(format!("advlab-demo-{}", std::process::id()));
    let mut config = ExperimentConfig::default();
    config.out_dir = dir.clone();
    config.seed = 5;
    config.corpus.n_train = 32;
    config.corpus.n_dev = 8;
    config.corpus.n_eval = 8;
    config.n_unlabeled = 8;
    config.encoder = EncoderConfig {
        layers: 2,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        input_dim: 80,
    };
    config.pretrain.epochs = 1;
    config.train.epochs = 1;
    config.scratch_epochs = 2;
    config.sweep = SweepConfig {
        epsilons: vec![2.0, 8.0, 16.0],
        steps: 2,
        ..SweepConfig::default()
    };

    {
        let mut lab = Lab::open(&config, false)?;
        lab.all()?;
        println!("first run: all stages executed");
        for (stage, entry) in &lab.manifest().stages {
            println!("  {stage}: {:?}, {} artifacts", entry.status, entry.artifacts.len());
        }
    }

    {
        let mut lab = Lab::open(&config, false)?;
        let reran_data = lab.data()?;
        let reran_train = lab.train()?;
        println!(
            "\nsecond run: data re-ran = {reran_data}, train re-ran = {reran_train} (both skipped)"
        );
    }

    let curves = std::fs::read_to_string(dir.join("evaluate/curves.csv"))
        .map_err(|e| advlab::LabError::io(dir.join("evaluate/curves.csv"), e))?;
    println!("\nfirst lines of curves.csv:");
    for line in curves.lines().take(5) {
        println!("  {line}");
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
