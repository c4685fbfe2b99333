use std::collections::{BTreeMap, HashSet};

use ihan::checkpoint::{read_checkpoint, write_checkpoint};
use ihan::data::{balance_indices, read_cohort, split_indices, write_cohort, Code, Encounter, LoadOptions, PatientRecord, SplitFractions};
use ihan::interpret::{aggregate_patient_code, explain};
use ihan::metrics::{auc, welch_t_test};
use ihan::model::{IhanParams, Mode, ModelDims};
use ihan::vocab::{VocabScope, Vocabulary};
use ihan::{seed, CodeType};
use proptest::prelude::*;

fn code_type() -> impl Strategy<Value = CodeType> {
    prop::sample::select(CodeType::ALL.to_vec())
}

fn encounter() -> impl Strategy<Value = Encounter> {
    (0u64..1000, prop::collection::vec((code_type(), 0usize..6), 1..5)).prop_map(|(day, codes)| Encounter {
        date: chrono::NaiveDate::from_ymd_opt(2017, 1, 1).unwrap() + chrono::Days::new(day),
        codes: codes
            .into_iter()
            .map(|(t, i)| Code::new(t, format!("{}{i}", t.as_str())))
            .collect(),
    })
}

fn patient(id: usize) -> impl Strategy<Value = PatientRecord> {
    (0u8..2, prop::collection::vec(encounter(), 1..6)).prop_map(move |(label, encounters)| {
        let mut p = PatientRecord {
            patient_id: format!("p{id}"),
            label,
            encounters,
        };
        p.normalize();
        p
    })
}

fn cohort() -> impl Strategy<Value = Vec<PatientRecord>> {
    (2usize..8).prop_flat_map(|n| (0..n).map(patient).collect::<Vec<_>>())
}

fn mode() -> impl Strategy<Value = Mode> {
    prop::sample::select(vec![Mode::SingleType, Mode::AlgorithmComb, Mode::DataComb])
}

fn model_for(mode: Mode, cohort: &[PatientRecord], s: u64) -> IhanParams {
    let types: &[CodeType] = if mode == Mode::SingleType { &[CodeType::Diag] } else { &CodeType::ALL };
    let dims = ModelDims {
        embedding_dim: 3,
        hidden_dim: 4,
    };
    IhanParams::from_training_data(mode, types, cohort, 1, dims, &mut seed::stream(s, seed::INIT)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocabulary_round_trips(codes in prop::collection::vec((code_type(), 0usize..30), 0..40), min_count in 1usize..3) {
        let corpus: Vec<(CodeType, String)> = codes.iter().map(|(t, i)| (*t, format!("C{i}"))).collect();
        let v = Vocabulary::build_combined(corpus.iter().map(|(t, c)| (*t, c.as_str())), min_count);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(back.unk_index(), back.size() - 1);
        for (t, c) in &corpus {
            prop_assert_eq!(back.lookup(*t, c), v.lookup(*t, c));
        }
        let distinct: HashSet<usize> = (0..v.size() - 1).map(|i| v.lookup_key(v.code(i).unwrap())).collect();
        prop_assert_eq!(distinct.len(), v.size() - 1);
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..40),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        prop_assert_eq!(auc(&squashed, &labels).unwrap(), a);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn welch_is_antisymmetric(
        a in prop::collection::vec(0.5f64..1.0, 2..12),
        b in prop::collection::vec(0.5f64..1.0, 2..12),
    ) {
        let (Ok(x), Ok(y)) = (welch_t_test(&a, &b), welch_t_test(&b, &a)) else { return Ok(()) };
        prop_assert_eq!(x.t, -y.t);
        prop_assert_eq!(x.p, y.p);
        prop_assert!((0.0..=1.0).contains(&x.p));
    }

    #[test]
    fn cohort_jsonl_round_trips(c in cohort()) {
        let mut bytes = Vec::new();
        write_cohort(&mut bytes, &c).unwrap();
        let back = read_cohort(bytes.as_slice(), LoadOptions::unfiltered()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn split_partitions_the_cohort(labels in prop::collection::vec(0u8..2, 5..200), s in 0u64..1000, stratified: bool) {
        let (tr, va, te) = split_indices(&labels, SplitFractions::default(), s, stratified).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn balancing_keeps_cases(labels in prop::collection::vec(0u8..2, 1..300), ratio in 1usize..5, s in 0u64..100) {
        let kept = balance_indices(&labels, ratio, s).unwrap();
        let cases = labels.iter().filter(|&&l| l == 1).count();
        let controls = labels.len() - cases;
        let kept_cases = kept.iter().filter(|&&i| labels[i] == 1).count();
        prop_assert_eq!(kept_cases, cases);
        prop_assert_eq!(kept.len() - kept_cases, (ratio * cases).min(controls));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn checkpoint_round_trips(c in cohort(), m in mode(), s in 0u64..50) {
        prop_assume!(c.iter().any(|p| p.has_type(CodeType::Diag)));
        let params = model_for(m, &c, s);
        let metrics = BTreeMap::from([("auc".to_string(), 0.5)]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params, None, &metrics, "2021-03-04T05:06:07Z").unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.params, &params);
        for p in &c {
            if let Ok(y) = params.predict(p) {
                prop_assert_eq!(back.params.predict(p).unwrap().to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn patient_level_sums_match_encounter_level(c in cohort(), m in mode(), s in 0u64..50) {
        prop_assume!(c.iter().any(|p| p.has_type(CodeType::Diag)));
        let params = model_for(m, &c, s);
        for p in &c {
            let Ok(report) = explain(&params, p) else { continue };
            let rows = aggregate_patient_code(&report);
            let encounter_total: f64 = report.entries.iter().map(|e| e.contribution).sum();
            let patient_total: f64 = rows.iter().map(|r| r.contribution).sum();
            prop_assert!((encounter_total - patient_total).abs() < 1e-12);
            for r in &rows {
                let direct: f64 = report
                    .entries
                    .iter()
                    .filter(|e| e.code_type == r.code_type && e.code == r.code)
                    .map(|e| e.contribution)
                    .sum();
                prop_assert!((direct - r.contribution).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unseen_codes_map_to_unk() {
    let v = Vocabulary::from_codes(VocabScope::Type(CodeType::Lab), vec!["L1".into(), "L2".into()], 1);
    assert_eq!(v.lookup(CodeType::Lab, "L3"), v.unk_index());
    assert_eq!(v.unk_index(), 2);
    let json = serde_json::to_string(&v).unwrap();
    assert!(json.contains("\"unk_index\":2"), "{json}");
    let tampered = json.replace("\"unk_index\":2", "\"unk_index\":0");
    assert!(serde_json::from_str::<Vocabulary>(&tampered).is_err());
}
