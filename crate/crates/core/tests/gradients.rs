use ihan::data::PatientRecord;
use ihan::gradcheck::coordinates;
use ihan::model::{IhanParams, Mode, ModelDims};
use ihan::seed;
use ihan::synth::{generate_synthetic, SyntheticSpec, TypeProfile};
use ihan::CodeType;

fn tiny_cohort() -> Vec<PatientRecord> {
    let mut spec = SyntheticSpec {
        n_patients: 12,
        encounters_mean: 4.0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    for profile in spec.types.values_mut() {
        *profile = TypeProfile {
            vocab_size: 12,
            n_risk_codes: 2,
            ..*profile
        };
    }
    generate_synthetic(&spec).unwrap().cohort
}

fn check(mode: Mode, types: &[CodeType]) {
    let cohort = tiny_cohort();
    let dims = ModelDims {
        embedding_dim: 4,
        hidden_dim: 3,
    };
    let mut rng = seed::stream(5, seed::INIT);
    let params = IhanParams::from_training_data(mode, types, &cohort[..8], 1, dims, &mut rng).unwrap();
    for patient in &cohort[8..] {
        if !types.iter().any(|&t| patient.has_type(t)) {
            continue;
        }
        let coords = coordinates(&params.store, 1e-5, |tape| params.loss_on_tape(tape, patient)).unwrap();
        for c in coords {
            // Below ~1e-9 the central difference is dominated by rounding of the loss.
            assert!(c.rel_error() < 1e-5 || c.abs_error() < 1e-9, "{mode} {c:?}");
        }
    }
}

#[test]
fn single_type_loss_gradient() {
    check(Mode::SingleType, &[CodeType::Diag]);
}

#[test]
fn algorithm_comb_loss_gradient() {
    check(Mode::AlgorithmComb, &[CodeType::Diag, CodeType::Lab, CodeType::Rx]);
}

#[test]
fn data_comb_loss_gradient() {
    check(Mode::DataComb, &CodeType::ALL);
}
