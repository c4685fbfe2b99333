//! Synthetic cohorts with planted, recency-weighted risk codes.
//!
//! Every patient gets a random number of dated encounters over a three-year
//! window. Each code slot is, with small probability, one of a handful of
//! planted risk codes per type, otherwise a Zipf-distributed background code.
//! The label is then drawn with
//!
//! ```text
//! p = σ(β₀ + risk_weight · Σ_occurrences 2^(−age_days / half_life))
//! ```
//!
//! where `age_days` counts back from the index date and `β₀` is solved so the
//! cohort's mean `p` equals `base_rate`. The planted set is returned as ground
//! truth for interpretability checks.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{Duration, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::data::{fuse_lab_code, Code, Cohort, Encounter, PatientRecord};
use crate::error::{IhanError, Result};
use crate::seed;
use crate::tape::sigmoid;
use crate::vocab::CodeType;

/// Per-type code-generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeProfile {
    /// Number of distinct codes of this type.
    pub vocab_size: usize,
    /// Number of those codes planted as risk codes.
    pub n_risk_codes: usize,
    /// Probability an encounter carries this type at all.
    pub presence: f64,
    /// Mean number of codes beyond the first when present (Poisson).
    pub extra_codes_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub types: BTreeMap<CodeType, TypeProfile>,
    pub base_rate: f64,
    pub risk_weight: f64,
    pub recency_half_life_days: f64,
    /// Probability that a code slot holds a planted risk code.
    pub risk_code_rate: f64,
    /// Zipf exponent of background code frequencies.
    pub zipf_exponent: f64,
    pub encounters_mean: f64,
    pub min_encounters: usize,
    pub max_encounters: usize,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    /// Date ages are measured from.
    pub index_date: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // Risk codes are planted among diagnoses only; the other types are
        // background that the model has to learn to ignore.
        let profile = |n_risk_codes, presence| TypeProfile {
            vocab_size: 500,
            n_risk_codes,
            presence,
            extra_codes_mean: 0.0,
        };
        let types = BTreeMap::from([
            (CodeType::Diag, profile(8, 0.85)),
            (CodeType::Proc, profile(0, 0.5)),
            (CodeType::Lab, profile(0, 0.35)),
            (CodeType::Rx, profile(0, 0.45)),
        ]);
        SyntheticSpec {
            n_patients: 2000,
            types,
            base_rate: 0.25,
            risk_weight: 6.0,
            recency_half_life_days: 120.0,
            risk_code_rate: 0.15,
            zipf_exponent: 2.0,
            encounters_mean: 10.0,
            min_encounters: 2,
            max_encounters: 60,
            window_start: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
            window_end: NaiveDate::from_ymd_opt(2019, 12, 31).unwrap(),
            index_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IhanError::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad(format!("base_rate {} outside (0, 1)", self.base_rate));
        }
        if !(self.recency_half_life_days > 0.0) {
            return bad("recency half-life must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.risk_code_rate) {
            return bad("risk_code_rate outside [0, 1]".into());
        }
        if self.min_encounters < 2 || self.max_encounters < self.min_encounters {
            return bad("need 2 <= min_encounters <= max_encounters".into());
        }
        let days = (self.window_end - self.window_start).num_days() + 1;
        if days < self.max_encounters as i64 {
            return bad("window too short for max_encounters distinct dates".into());
        }
        if self.index_date <= self.window_end {
            return bad("index date must follow the observation window".into());
        }
        if !self.types.contains_key(&CodeType::Diag) {
            return bad("diag profile required".into());
        }
        for (t, p) in &self.types {
            if p.n_risk_codes >= p.vocab_size {
                return bad(format!("{t}: need more codes than risk codes"));
            }
            if !(0.0..=1.0).contains(&p.presence) || p.extra_codes_mean < 0.0 {
                return bad(format!("{t}: invalid presence or extra-code mean"));
            }
        }
        Ok(())
    }
}

/// Code string for index `i` of a type; lab codes carry an abnormality suffix.
pub fn code_name(code_type: CodeType, i: usize) -> String {
    match code_type {
        CodeType::Diag => format!("D{i:04}"),
        CodeType::Proc => format!("P{i:04}"),
        CodeType::Lab => {
            let loinc = format!("{}-{}", 10_000 + i / 3, i % 10);
            fuse_lab_code(&loinc, ["", "H", "L"][i % 3])
        }
        CodeType::Rx => format!("RX{i:04}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub risk_codes: BTreeMap<CodeType, Vec<String>>,
    pub intercept: f64,
    pub risk_weight: f64,
    pub recency_half_life_days: f64,
    pub index_date: NaiveDate,
    /// Label probability used for each patient, in cohort order.
    pub label_probabilities: Vec<f64>,
}

impl GroundTruth {
    pub fn is_risk(&self, code_type: CodeType, code: &str) -> bool {
        self.risk_codes
            .get(&code_type)
            .is_some_and(|v| v.iter().any(|c| c == code))
    }

    pub fn n_risk_codes(&self) -> usize {
        self.risk_codes.values().map(Vec::len).sum()
    }

    /// Recency-weighted count of planted codes in `patient`.
    pub fn risk_score(&self, patient: &PatientRecord) -> f64 {
        risk_score(patient, &self.risk_set(), self.index_date, self.recency_half_life_days)
    }

    pub fn label_probability(&self, patient: &PatientRecord) -> f64 {
        sigmoid(self.intercept + self.risk_weight * self.risk_score(patient))
    }

    fn risk_set(&self) -> HashSet<(CodeType, &str)> {
        self.risk_codes
            .iter()
            .flat_map(|(t, codes)| codes.iter().map(move |c| (*t, c.as_str())))
            .collect()
    }
}

fn risk_score(
    patient: &PatientRecord,
    risk: &HashSet<(CodeType, &str)>,
    index_date: NaiveDate,
    half_life: f64,
) -> f64 {
    let mut s = 0.0;
    for enc in &patient.encounters {
        let age = (index_date - enc.date).num_days() as f64;
        let decay = (-age / half_life).exp2();
        for c in &enc.codes {
            if risk.contains(&(c.code_type, c.code.as_str())) {
                s += decay;
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub truth: GroundTruth,
}

struct TypeSampler {
    code_type: CodeType,
    profile: TypeProfile,
    names: Vec<String>,
    risk: Vec<usize>,
    background: Vec<usize>,
    background_dist: WeightedIndex<f64>,
    extra: Option<Poisson<f64>>,
}

impl TypeSampler {
    fn new(code_type: CodeType, profile: TypeProfile, zipf: f64, rng: &mut impl Rng) -> Self {
        let names: Vec<String> = (0..profile.vocab_size).map(|i| code_name(code_type, i)).collect();
        let mut risk: Vec<usize> =
            rand::seq::index::sample(rng, profile.vocab_size, profile.n_risk_codes).into_vec();
        risk.sort_unstable();
        let background: Vec<usize> = (0..profile.vocab_size).filter(|i| !risk.contains(i)).collect();
        let weights: Vec<f64> = (0..background.len())
            .map(|rank| 1.0 / ((rank + 1) as f64).powf(zipf))
            .collect();
        let extra = (profile.extra_codes_mean > 0.0)
            .then(|| Poisson::new(profile.extra_codes_mean).expect("positive mean"));
        TypeSampler {
            code_type,
            profile,
            names,
            risk,
            background,
            background_dist: WeightedIndex::new(weights).expect("non-empty background"),
            extra,
        }
    }

    fn draw(&self, risk_rate: f64, rng: &mut impl Rng) -> Code {
        let idx = if !self.risk.is_empty() && rng.gen_bool(risk_rate) {
            self.risk[rng.gen_range(0..self.risk.len())]
        } else {
            self.background[self.background_dist.sample(rng)]
        };
        Code::new(self.code_type, self.names[idx].clone())
    }

    fn count(&self, rng: &mut impl Rng) -> usize {
        1 + self.extra.map_or(0, |p| p.sample(rng) as usize)
    }
}

/// Generates a cohort and its planted risk codes. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, seed::GENERATE);
    let samplers: Vec<TypeSampler> = spec
        .types
        .iter()
        .map(|(&t, &p)| TypeSampler::new(t, p, spec.zipf_exponent, &mut rng))
        .collect();
    let diag = samplers
        .iter()
        .find(|s| s.code_type == CodeType::Diag)
        .expect("validated");
    let window_days = ((spec.window_end - spec.window_start).num_days() + 1) as usize;
    let enc_count = Poisson::new(spec.encounters_mean.max(1e-9)).expect("positive mean");

    let mut cohort = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let n_enc = (enc_count.sample(&mut rng) as usize).clamp(spec.min_encounters, spec.max_encounters);
        let mut days = rand::seq::index::sample(&mut rng, window_days, n_enc).into_vec();
        days.sort_unstable();
        let mut encounters: Vec<Encounter> = days
            .into_iter()
            .map(|d| {
                let mut codes = Vec::new();
                for s in &samplers {
                    if rng.gen_bool(s.profile.presence) {
                        for _ in 0..s.count(&mut rng) {
                            codes.push(s.draw(spec.risk_code_rate, &mut rng));
                        }
                    }
                }
                Encounter {
                    date: spec.window_start + Duration::days(d as i64),
                    codes,
                }
            })
            .collect();
        // At least two encounters must carry a diagnosis; every encounter needs a code.
        let mut with_diag = encounters.iter().filter(|e| e.has_type(CodeType::Diag)).count();
        for e in encounters.iter_mut() {
            if e.codes.is_empty() || (with_diag < 2 && !e.has_type(CodeType::Diag)) {
                if !e.has_type(CodeType::Diag) {
                    with_diag += 1;
                }
                e.codes.push(diag.draw(spec.risk_code_rate, &mut rng));
            }
        }
        cohort.push(PatientRecord {
            patient_id: format!("P{p:06}"),
            label: 0,
            encounters,
        });
    }

    let risk_codes: BTreeMap<CodeType, Vec<String>> = samplers
        .iter()
        .map(|s| (s.code_type, s.risk.iter().map(|&i| s.names[i].clone()).collect()))
        .collect();
    let mut truth = GroundTruth {
        risk_codes,
        intercept: 0.0,
        risk_weight: spec.risk_weight,
        recency_half_life_days: spec.recency_half_life_days,
        index_date: spec.index_date,
        label_probabilities: Vec::new(),
    };
    let scores: Vec<f64> = cohort.iter().map(|p| truth.risk_score(p)).collect();
    truth.intercept = solve_intercept(&scores, spec.risk_weight, spec.base_rate);
    truth.label_probabilities = cohort.iter().map(|p| truth.label_probability(p)).collect();
    for (patient, &prob) in cohort.iter_mut().zip(&truth.label_probabilities) {
        patient.label = u8::from(rng.gen_bool(prob));
    }
    Ok(SyntheticCohort { cohort, truth })
}

/// `β₀` with `mean_i σ(β₀ + w·s_i) = target`, by bisection.
fn solve_intercept(scores: &[f64], weight: f64, target: f64) -> f64 {
    let mean_p = |b: f64| scores.iter().map(|s| sigmoid(b + weight * s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Planted codes as a set of `(type, code)` pairs.
pub fn planted_set(truth: &GroundTruth) -> BTreeSet<(CodeType, String)> {
    truth
        .risk_codes
        .iter()
        .flat_map(|(t, v)| v.iter().map(move |c| (*t, c.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_patients: 200,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 7, ..small() }).unwrap();
        assert_ne!(a.cohort, c.cohort);
    }

    #[test]
    fn records_are_well_formed() {
        let s = generate_synthetic(&small()).unwrap();
        for p in &s.cohort {
            assert!(p.encounters.len() >= 2);
            assert!(p.encounters.windows(2).all(|w| w[0].date < w[1].date));
            assert!(p.encounters.iter().all(|e| !e.codes.is_empty()));
            assert!(p.encounters.iter().filter(|e| e.has_type(CodeType::Diag)).count() >= 2);
        }
        assert_eq!(s.truth.n_risk_codes(), 8);
    }

    #[test]
    fn logged_probability_recomputes_from_codes() {
        let s = generate_synthetic(&small()).unwrap();
        let planted = planted_set(&s.truth);
        for (p, &logged) in s.cohort.iter().zip(&s.truth.label_probabilities) {
            // Independent recomputation from the record.
            let mut score = 0.0;
            for e in &p.encounters {
                let age = (s.truth.index_date - e.date).num_days() as f64;
                for c in &e.codes {
                    if planted.contains(&(c.code_type, c.code.clone())) {
                        score += 2f64.powf(-age / s.truth.recency_half_life_days);
                    }
                }
            }
            let z = s.truth.intercept + s.truth.risk_weight * score;
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((expected - logged).abs() < 1e-14);
            assert_eq!(s.truth.label_probability(p), logged);
        }
    }

    #[test]
    fn lab_names_are_fused() {
        assert_eq!(code_name(CodeType::Lab, 4), "10001-4_H");
        assert_eq!(code_name(CodeType::Lab, 3), "10001-3");
    }

    #[test]
    fn zero_risk_weight_gives_constant_probability() {
        let s = generate_synthetic(&SyntheticSpec {
            risk_weight: 0.0,
            ..small()
        })
        .unwrap();
        let first = s.truth.label_probabilities[0];
        assert!((first - 0.25).abs() < 1e-9);
        assert!(s.truth.label_probabilities.iter().all(|&p| p == first));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic(&SyntheticSpec { base_rate: 1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { min_encounters: 1, ..small() }).is_err());
    }
}
