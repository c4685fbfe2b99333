//! How much signal a synthetic cohort carries: AUC of the true label
//! probabilities, of the unweighted planted-code count, and cohort statistics.
//!
//! cargo run --release --example synthetic_signal -- [n_patients] [half_life_days] [risk_weight]

use ihan::metrics::auc;
use ihan::synth::{generate_synthetic, planted_set, SyntheticSpec};

fn main() -> ihan::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_patients: args.first().map_or(defaults.n_patients, |&n| n as usize),
        recency_half_life_days: args.get(1).copied().unwrap_or(defaults.recency_half_life_days),
        risk_weight: args.get(2).copied().unwrap_or(defaults.risk_weight),
        ..defaults
    };
    let synthetic = generate_synthetic(&spec)?;
    let cohort = &synthetic.cohort;
    let truth = &synthetic.truth;
    let planted = planted_set(truth);
    let labels: Vec<u8> = cohort.iter().map(|p| p.label).collect();

    let counts: Vec<f64> = cohort
        .iter()
        .map(|p| {
            p.codes()
                .filter(|(t, c)| planted.contains(&(*t, c.to_string())))
                .count() as f64
        })
        .collect();
    let n_cases = labels.iter().filter(|&&y| y == 1).count();
    let encounters: usize = cohort.iter().map(|p| p.encounters.len()).sum();
    let codes: usize = cohort.iter().map(|p| p.code_count()).sum();

    println!("patients {}  cases {}  ({:.3})", cohort.len(), n_cases, n_cases as f64 / cohort.len() as f64);
    println!(
        "encounters/patient {:.1}  codes/patient {:.1}  planted codes {}",
        encounters as f64 / cohort.len() as f64,
        codes as f64 / cohort.len() as f64,
        planted.len()
    );
    println!("intercept {:.3}  risk weight {}", truth.intercept, truth.risk_weight);
    println!("AUC of true probabilities   {:.4}", auc(&truth.label_probabilities, &labels)?);
    println!("AUC of planted-code count   {:.4}", auc(&counts, &labels)?);
    Ok(())
}
