//! Finite-difference check of the full training loss on a three-patient toy cohort.
//!
//! cargo run --release --example gradient_check

use ihan::data::{Code, Encounter, PatientRecord};
use ihan::gradcheck::grad_check;
use ihan::model::{IhanParams, Mode, ModelDims};
use ihan::seed;
use ihan::CodeType;
use rand::Rng;

fn encounter(date: &str, codes: &[(CodeType, &str)]) -> Encounter {
    Encounter {
        date: date.parse().unwrap(),
        codes: codes.iter().map(|&(t, c)| Code::new(t, c)).collect(),
    }
}

fn toy_cohort() -> Vec<PatientRecord> {
    use CodeType::*;
    vec![
        PatientRecord {
            patient_id: "a".into(),
            label: 1,
            encounters: vec![
                encounter("2019-01-03", &[(Diag, "D1"), (Diag, "D2"), (Lab, "L1_H"), (Rx, "R1"), (Proc, "P2")]),
                encounter("2019-04-11", &[(Diag, "D3"), (Proc, "P1")]),
                encounter("2019-09-27", &[(Diag, "D1"), (Lab, "L2"), (Rx, "R2")]),
            ],
        },
        PatientRecord {
            patient_id: "b".into(),
            label: 0,
            encounters: vec![
                encounter("2018-12-01", &[(Diag, "D2"), (Proc, "P2"), (Rx, "R1")]),
                encounter("2019-06-15", &[(Diag, "D4"), (Lab, "L1_H"), (Lab, "L2"), (Rx, "R2"), (Proc, "P1")]),
            ],
        },
        PatientRecord {
            patient_id: "c".into(),
            label: 1,
            encounters: vec![
                encounter("2019-02-20", &[(Diag, "D3"), (Diag, "D4"), (Rx, "R2"), (Proc, "P1")]),
                encounter("2019-03-02", &[(Lab, "L2"), (Proc, "P2")]),
                encounter("2019-11-30", &[(Diag, "D1"), (Lab, "L1_H")]),
            ],
        },
    ]
}

fn main() -> ihan::Result<()> {
    let cohort = toy_cohort();
    let dims = ModelDims {
        embedding_dim: 4,
        hidden_dim: 3,
    };
    let cases: [(Mode, &[CodeType]); 3] = [
        (Mode::SingleType, &[CodeType::Diag]),
        (Mode::AlgorithmComb, &CodeType::ALL),
        (Mode::DataComb, &CodeType::ALL),
    ];
    for (mode, types) in cases {
        let mut rng = seed::stream(11, seed::INIT);
        let mut params = IhanParams::from_training_data(mode, types, &cohort, 1, dims, &mut rng)?;
        // Check at a generic point rather than at the small-scale initialisation,
        // where some recurrent gradients are ~1e-8 and drown in rounding noise.
        for id in params.store.ids().collect::<Vec<_>>() {
            for x in params.store.get_mut(id).data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let report = grad_check(&params.store, 1e-5, |tape| {
            let mut total = params.loss_on_tape(tape, &cohort[0])?;
            for p in &cohort[1..] {
                let loss = params.loss_on_tape(tape, p)?;
                total = tape.add(total, loss)?;
            }
            Ok(total)
        })?;
        println!(
            "{:<15} {:>4} coordinates  max relative error {:.2e}",
            mode.as_str(),
            report.coordinates,
            report.max_rel_error
        );
        if let Some(w) = report.worst {
            println!("{:<15} worst: {}[{}] analytic {:.6e} numeric {:.6e}", "", w.param, w.index, w.analytic, w.numeric);
        }
    }
    Ok(())
}
