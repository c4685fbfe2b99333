//! Write a synthetic cohort and its ground truth to disk, read them back and
//! summarise what was generated.
//!
//! cargo run --release --example generate_cohort -- [out_dir] [n_patients]

use std::path::PathBuf;

use ihan::data::{load_cohort, save_cohort, LoadOptions};
use ihan::synth::{generate_synthetic, SyntheticSpec};
use ihan::CodeType;

fn main() -> ihan::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ihan-demo"));
    let n_patients = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    std::fs::create_dir_all(&dir)?;

    let spec = SyntheticSpec {
        n_patients,
        ..SyntheticSpec::default()
    };
    let synthetic = generate_synthetic(&spec)?;
    let cohort_path = dir.join("cohort.jsonl.gz");
    save_cohort(&cohort_path, &synthetic.cohort)?;
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&synthetic.truth)?)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;

    let cohort = load_cohort(&cohort_path, LoadOptions::unfiltered())?;
    assert_eq!(cohort, synthetic.cohort);
    let eligible = load_cohort(&cohort_path, LoadOptions::default())?;
    let cases = cohort.iter().filter(|p| p.is_case()).count();
    let encounters: usize = cohort.iter().map(|p| p.encounters.len()).sum();
    println!("wrote {} ({} patients)", cohort_path.display(), cohort.len());
    println!("positive rate {:.3}", cases as f64 / cohort.len() as f64);
    println!("{:.1} encounters per patient", encounters as f64 / cohort.len() as f64);
    println!("{} patients with >= 2 diagnosis encounters", eligible.len());
    for t in CodeType::ALL {
        let n: usize = cohort.iter().map(|p| p.codes().filter(|(ct, _)| *ct == t).count()).sum();
        let planted = synthetic.truth.risk_codes.get(&t).map_or(0, Vec::len);
        println!("{:<5} {n:>7} occurrences, {planted} planted risk codes", t.as_str());
    }

    let first = &cohort[0];
    println!("\nfirst patient ({}, label {}):", first.patient_id, first.label);
    for e in first.encounters.iter().take(3) {
        let codes: Vec<String> = e.codes.iter().map(|c| format!("{}:{}", c.code_type.as_str(), c.code)).collect();
        println!("  {}  {}", e.date, codes.join(" "));
    }
    Ok(())
}
