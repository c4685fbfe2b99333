//! Save a trained model, load it back and confirm predictions are bit-identical.
//!
//! cargo run --release --example checkpoint_roundtrip

use std::collections::BTreeMap;

use ihan::checkpoint::{load_checkpoint, save_checkpoint};
use ihan::data::split_cohort;
use ihan::model::Mode;
use ihan::synth::{generate_synthetic, SyntheticSpec};
use ihan::train::{evaluate_auc, score, train, TrainConfig};

fn main() -> ihan::Result<()> {
    let spec = SyntheticSpec {
        n_patients: 600,
        ..SyntheticSpec::default()
    };
    let cohort = generate_synthetic(&spec)?.cohort;
    let split = split_cohort(&cohort, Default::default(), 5, true)?;
    let config = TrainConfig {
        mode: Mode::DataComb,
        embedding_dim: 32,
        hidden_dim: 32,
        batch_size: 16,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let (params, history) = train(&config, &split.train, &split.valid)?;
    let test_auc = evaluate_auc(&params, &split.test)?;
    let metrics = BTreeMap::from([("test_auc".to_string(), test_auc)]);

    let path = std::env::temp_dir().join("ihan-roundtrip.ckpt");
    save_checkpoint(&path, &params, Some(&config), &metrics)?;
    let size = std::fs::metadata(&path)?.len();
    let loaded = load_checkpoint(&path)?;
    println!(
        "saved {} ({size} bytes, {} tensors) at {}, best epoch {}",
        path.display(),
        loaded.params.store.len(),
        loaded.saved_at,
        history.best_epoch
    );

    let mut identical = 0;
    for p in &cohort {
        if score(&params, p)?.to_bits() == score(&loaded.params, p)?.to_bits() {
            identical += 1;
        }
    }
    println!("{identical}/{} predictions bit-identical", cohort.len());
    println!("stored config matches: {}", loaded.train_config.as_ref() == Some(&config));
    println!("stored test AUC {:.4}", loaded.metrics["test_auc"]);
    Ok(())
}
