//! Train a model, then read its contribution coefficients at the three levels:
//! one patient's encounters, that patient's codes, and the whole cohort.
//!
//! cargo run --release --example explain_patient -- [mode]

use ihan::data::split_cohort;
use ihan::interpret::{aggregate_code_level, aggregate_patient_code, explain, DISPLAY_THRESHOLD};
use ihan::model::Mode;
use ihan::synth::{generate_synthetic, SyntheticSpec};
use ihan::train::{evaluate_auc, train, TrainConfig};

fn main() -> ihan::Result<()> {
    let mode: Mode = match std::env::args().nth(1) {
        Some(m) => m.parse()?,
        None => Mode::AlgorithmComb,
    };
    let synthetic = generate_synthetic(&SyntheticSpec::default())?;
    let truth = &synthetic.truth;
    let split = split_cohort(&synthetic.cohort, Default::default(), 3, true)?;
    let config = TrainConfig {
        mode,
        embedding_dim: 64,
        hidden_dim: 64,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    let (params, _) = train(&config, &split.train, &split.valid)?;
    println!("{} test AUC {:.4}\n", config.label(), evaluate_auc(&params, &split.test)?);

    // The highest-risk test patient.
    let patient = split
        .test
        .iter()
        .filter_map(|p| params.predict(p).ok().map(|s| (s, p)))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
        .expect("non-empty test set");
    let report = explain(&params, patient)?;
    println!(
        "patient {} (label {}): prediction {:.4}, bias {:+.4}, sum of contributions {:+.4}",
        patient.patient_id,
        patient.label,
        report.prediction,
        report.bias,
        report.total()
    );
    for e in report.sorted_entries() {
        if e.contribution.abs() > DISPLAY_THRESHOLD {
            let mark = if truth.is_risk(e.code_type, &e.code) { "*" } else { "" };
            println!("  {}  {:<4} {:<10} {:+.4}{mark}", e.date, e.code_type.as_str(), e.code, e.contribution);
        }
    }

    println!("\nper code:");
    let mut rows = aggregate_patient_code(&report);
    rows.sort_by(|a, b| b.contribution.abs().total_cmp(&a.contribution.abs()));
    for r in rows.iter().take(8) {
        println!("  {:<4} {:<10} {:+.4}", r.code_type.as_str(), r.code, r.contribution);
    }

    let reports: Vec<_> = synthetic.cohort.iter().filter_map(|p| explain(&params, p).ok()).collect();
    println!("\ncohort, top codes by mean contribution (* = planted):");
    for r in aggregate_code_level(&reports, 50).iter().take(2 * truth.n_risk_codes()) {
        let mark = if truth.is_risk(r.code_type, &r.code) { "*" } else { "" };
        println!(
            "  {:<4} {:<10} {:>5} patients  {:+.4}{mark}",
            r.code_type.as_str(),
            r.code,
            r.n_patients,
            r.mean_contribution
        );
    }
    Ok(())
}
