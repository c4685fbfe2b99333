//! Generate a synthetic cohort, train an algorithm_comb model and report test AUC.
//!
//! cargo run --release --example train_synthetic -- [n_patients] [dim] [max_epochs]

use std::time::Instant;

use ihan::data::{split_cohort, SplitFractions};
use ihan::synth::{generate_synthetic, SyntheticSpec};
use ihan::train::{evaluate_auc, train, TrainConfig};

fn main() -> ihan::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_patients = args.first().copied().unwrap_or(2000);
    let dim = args.get(1).copied().unwrap_or(64);
    let max_epochs = args.get(2).copied().unwrap_or(50);

    let spec = SyntheticSpec {
        n_patients,
        ..SyntheticSpec::default()
    };
    let synthetic = generate_synthetic(&spec)?;
    let split = split_cohort(&synthetic.cohort, SplitFractions::default(), 7, true)?;
    let config = TrainConfig {
        embedding_dim: dim,
        hidden_dim: dim,
        batch_size: 16,
        max_epochs,
        seed: 7,
        ..TrainConfig::default()
    };

    let started = Instant::now();
    let (params, history) = train(&config, &split.train, &split.valid)?;
    let elapsed = started.elapsed().as_secs_f64();
    for (epoch, (tr, va)) in history.train_loss.iter().zip(&history.valid_loss).enumerate() {
        println!("epoch {:>2}  train {tr:.4}  valid {va:.4}", epoch + 1);
    }
    println!(
        "best epoch {} of {}, {:.1}s ({:.2}s/epoch)",
        history.best_epoch,
        history.epochs_run,
        elapsed,
        elapsed / history.epochs_run as f64
    );
    println!("train AUC {:.4}", evaluate_auc(&params, &split.train)?);
    println!("test AUC {:.4}", evaluate_auc(&params, &split.test)?);
    Ok(())
}
