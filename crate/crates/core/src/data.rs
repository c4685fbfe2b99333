//! Patient records, the JSONL cohort format, and cohort preparation
//! (lab-code fusion, case/non-case balancing, train/valid/test splitting).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};
use crate::seed;
use crate::vocab::CodeType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    #[serde(rename = "type")]
    pub code_type: CodeType,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Code {
    pub fn new(code_type: CodeType, code: impl Into<String>) -> Self {
        Code {
            code_type,
            code: code.into(),
            description: None,
        }
    }
}

/// Everything that happened to one patient on one date of service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub date: NaiveDate,
    pub codes: Vec<Code>,
}

impl Encounter {
    pub fn codes_of(&self, code_type: CodeType) -> impl Iterator<Item = &Code> {
        self.codes.iter().filter(move |c| c.code_type == code_type)
    }

    pub fn has_type(&self, code_type: CodeType) -> bool {
        self.codes.iter().any(|c| c.code_type == code_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: u8,
    pub encounters: Vec<Encounter>,
}

impl PatientRecord {
    /// Sorts encounters by date, merges same-date encounters (keeping duplicate
    /// codes), and drops encounters left without codes.
    pub fn normalize(&mut self) {
        let mut by_date: BTreeMap<NaiveDate, Vec<Code>> = BTreeMap::new();
        for enc in self.encounters.drain(..) {
            by_date.entry(enc.date).or_default().extend(enc.codes);
        }
        self.encounters = by_date
            .into_iter()
            .filter(|(_, codes)| !codes.is_empty())
            .map(|(date, codes)| Encounter { date, codes })
            .collect();
    }

    pub fn is_case(&self) -> bool {
        self.label == 1
    }

    pub fn code_count(&self) -> usize {
        self.encounters.iter().map(|e| e.codes.len()).sum()
    }

    pub fn has_type(&self, code_type: CodeType) -> bool {
        self.encounters.iter().any(|e| e.has_type(code_type))
    }

    /// Every `(type, code)` occurrence in date order.
    pub fn codes(&self) -> impl Iterator<Item = (CodeType, &str)> {
        self.encounters
            .iter()
            .flat_map(|e| e.codes.iter().map(|c| (c.code_type, c.code.as_str())))
    }
}

pub type Cohort = Vec<PatientRecord>;

/// Every code occurrence across a cohort, for vocabulary construction.
pub fn corpus(cohort: &[PatientRecord]) -> impl Iterator<Item = (CodeType, &str)> {
    cohort.iter().flat_map(PatientRecord::codes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep only patients with at least this many encounters carrying a diagnosis code.
    pub min_diag_encounters: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            min_diag_encounters: Some(2),
        }
    }
}

impl LoadOptions {
    pub fn unfiltered() -> Self {
        LoadOptions {
            min_diag_encounters: None,
        }
    }

    pub fn eligible(&self, p: &PatientRecord) -> bool {
        match self.min_diag_encounters {
            None => true,
            Some(n) => p.encounters.iter().filter(|e| e.has_type(CodeType::Diag)).count() >= n,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a JSONL cohort (gzip when the name ends in `.gz`).
pub fn load_cohort(path: impl AsRef<Path>, options: LoadOptions) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    read_cohort(BufReader::new(reader), options)
}

pub fn read_cohort(reader: impl BufRead, options: LoadOptions) -> Result<Cohort> {
    let mut cohort = Vec::new();
    let mut dropped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut patient: PatientRecord =
            serde_json::from_str(&line).map_err(|e| IhanError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if patient.label > 1 {
            return Err(IhanError::Parse {
                line: i + 1,
                message: format!("label must be 0 or 1, got {}", patient.label),
            });
        }
        patient.normalize();
        if options.eligible(&patient) {
            cohort.push(patient);
        } else {
            dropped += 1;
        }
    }
    if cohort.is_empty() && dropped == 0 {
        log::warn!("cohort file holds no patients");
    }
    if dropped > 0 {
        log::info!("eligibility filter dropped {dropped} patients");
    }
    Ok(cohort)
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    if is_gz(path) {
        let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
        write_cohort(&mut w, cohort)?;
        w.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        write_cohort(&mut w, cohort)?;
        w.flush()?;
    }
    Ok(())
}

pub fn write_cohort(mut w: impl Write, cohort: &[PatientRecord]) -> Result<()> {
    for p in cohort {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Lab input code: LOINC joined to its abnormality flag, e.g. `88294-4_L`.
pub fn fuse_lab_code(loinc: &str, abnormality: &str) -> String {
    if abnormality.is_empty() {
        loinc.to_string()
    } else {
        format!("{loinc}_{abnormality}")
    }
}

/// Indices kept by [`balance_cohort`]: every case plus `ratio × cases` non-cases drawn
/// without replacement, returned in original order.
pub fn balance_indices(labels: &[u8], ratio: usize, seed: u64) -> Result<Vec<usize>> {
    if ratio < 1 {
        return Err(IhanError::Config("balance ratio must be at least 1".into()));
    }
    let cases: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut controls: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let wanted = cases.len() * ratio;
    if wanted > controls.len() {
        log::warn!(
            "only {} non-cases available for {} requested; keeping all",
            controls.len(),
            wanted
        );
    } else {
        let mut rng = seed::stream(seed, seed::BALANCE);
        let picked = rand::seq::index::sample(&mut rng, controls.len(), wanted);
        let mut chosen: Vec<usize> = picked.into_iter().map(|i| controls[i]).collect();
        chosen.sort_unstable();
        controls = chosen;
    }
    let mut keep = cases;
    keep.extend(controls);
    keep.sort_unstable();
    Ok(keep)
}

pub fn balance_cohort(cohort: &[PatientRecord], ratio: usize, seed: u64) -> Result<Cohort> {
    let labels: Vec<u8> = cohort.iter().map(|p| p.label).collect();
    Ok(balance_indices(&labels, ratio, seed)?
        .into_iter()
        .map(|i| cohort[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, valid, test };
        f.validate()?;
        Ok(f)
    }

    /// Parses `0.6,0.2,0.2`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| IhanError::Config(format!("split fraction {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(IhanError::Config(format!(
                "expected three split fractions, got {}",
                parts.len()
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(IhanError::Config(format!(
                "split fractions must be positive: {all:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(IhanError::Config(format!(
                "split fractions must sum to 1: {all:?}"
            )));
        }
        Ok(())
    }

    fn sizes(&self, n: usize) -> (usize, usize) {
        let train = ((n as f64) * self.train).round() as usize;
        let valid = (((n as f64) * self.valid).round() as usize).min(n - train.min(n));
        (train.min(n), valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Cohort,
    pub valid: Cohort,
    pub test: Cohort,
}

/// Index-level split: `(train, valid, test)` positions into `labels`.
pub fn split_indices(
    labels: &[u8],
    fractions: SplitFractions,
    seed: u64,
    stratified: bool,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    fractions.validate()?;
    let mut rng = seed::stream(seed, seed::SPLIT);
    let strata: Vec<Vec<usize>> = if stratified {
        vec![
            (0..labels.len()).filter(|&i| labels[i] == 1).collect(),
            (0..labels.len()).filter(|&i| labels[i] != 1).collect(),
        ]
    } else {
        vec![(0..labels.len()).collect()]
    };
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let (nt, nv) = fractions.sizes(stratum.len());
        train.extend_from_slice(&stratum[..nt]);
        valid.extend_from_slice(&stratum[nt..nt + nv]);
        test.extend_from_slice(&stratum[nt + nv..]);
    }
    Ok((train, valid, test))
}

pub fn split_cohort(
    cohort: &[PatientRecord],
    fractions: SplitFractions,
    seed: u64,
    stratified: bool,
) -> Result<Split> {
    let labels: Vec<u8> = cohort.iter().map(|p| p.label).collect();
    let (tr, va, te) = split_indices(&labels, fractions, seed, stratified)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| cohort[i].clone()).collect();
    Ok(Split {
        train: pick(tr),
        valid: pick(va),
        test: pick(te),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn patient(id: &str, label: u8) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            label,
            encounters: Vec::new(),
        }
    }

    #[test]
    fn lab_fusion() {
        assert_eq!(fuse_lab_code("88294-4", "L"), "88294-4_L");
        assert_eq!(fuse_lab_code("2160-0", ""), "2160-0");
        assert_eq!(fuse_lab_code("2160-0", "H"), "2160-0_H");
    }

    #[test]
    fn loader_merges_sorts_and_parses() {
        let text = r#"{"patient_id":"p1","label":1,"encounters":[
            {"date":"2019-03-01","codes":[{"type":"lab","code":"2160-0_H"}]},
            {"date":"2018-01-05","codes":[{"type":"diag","code":"N18.3","description":"CKD 3"}]},
            {"date":"2019-03-01","codes":[{"type":"diag","code":"I10"},{"type":"rx","code":"3610"}]}
        ]}"#
        .replace('\n', " ");
        let cohort = read_cohort(text.as_bytes(), LoadOptions::unfiltered()).unwrap();
        let p = &cohort[0];
        assert_eq!(p.encounters.len(), 2);
        assert_eq!(p.encounters[0].date, day("2018-01-05"));
        assert_eq!(p.encounters[1].codes.len(), 3);
        assert_eq!(p.encounters[0].codes[0].description.as_deref(), Some("CKD 3"));
    }

    #[test]
    fn loader_reports_line_numbers() {
        let text = "{\"patient_id\":\"a\",\"label\":0,\"encounters\":[]}\n{not json}\n";
        match read_cohort(text.as_bytes(), LoadOptions::unfiltered()) {
            Err(IhanError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let bad_type = r#"{"patient_id":"a","label":0,"encounters":[{"date":"2019-01-01","codes":[{"type":"xray","code":"1"}]}]}"#;
        assert!(matches!(
            read_cohort(bad_type.as_bytes(), LoadOptions::unfiltered()),
            Err(IhanError::Parse { line: 1, .. })
        ));
        let bad_label = r#"{"patient_id":"a","label":2,"encounters":[]}"#;
        assert!(read_cohort(bad_label.as_bytes(), LoadOptions::unfiltered()).is_err());
    }

    #[test]
    fn empty_input_is_empty_cohort() {
        assert!(read_cohort(&b""[..], LoadOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn eligibility_needs_two_diag_encounters() {
        let text = r#"{"patient_id":"a","label":0,"encounters":[{"date":"2019-01-01","codes":[{"type":"diag","code":"1"}]},{"date":"2019-01-02","codes":[{"type":"rx","code":"1"}]}]}"#;
        assert!(read_cohort(text.as_bytes(), LoadOptions::default()).unwrap().is_empty());
        assert_eq!(read_cohort(text.as_bytes(), LoadOptions::unfiltered()).unwrap().len(), 1);
    }

    #[test]
    fn gz_roundtrip() {
        let dir = std::env::temp_dir().join(format!("ihan-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut p = patient("x", 1);
        p.encounters.push(Encounter {
            date: day("2019-05-06"),
            codes: vec![Code::new(CodeType::Proc, "99213")],
        });
        for name in ["c.jsonl", "c.jsonl.gz"] {
            let path = dir.join(name);
            save_cohort(&path, std::slice::from_ref(&p)).unwrap();
            let back = load_cohort(&path, LoadOptions::unfiltered()).unwrap();
            assert_eq!(back, vec![p.clone()]);
        }
    }

    #[test]
    fn balance_arithmetic_and_determinism() {
        let mut cohort: Vec<PatientRecord> = (0..10).map(|i| patient(&format!("c{i}"), 1)).collect();
        cohort.extend((0..100).map(|i| patient(&format!("n{i}"), 0)));
        let a = balance_cohort(&cohort, 3, 9).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.iter().filter(|p| p.is_case()).count(), 10);
        assert_eq!(a, balance_cohort(&cohort, 3, 9).unwrap());
        assert_ne!(a, balance_cohort(&cohort, 3, 10).unwrap());
        assert!(balance_cohort(&cohort, 0, 1).is_err());
    }

    #[test]
    fn balance_with_too_few_controls_keeps_everything() {
        let cohort = vec![patient("a", 1), patient("b", 1), patient("c", 0)];
        assert_eq!(balance_cohort(&cohort, 3, 0).unwrap().len(), 3);
    }

    #[test]
    fn split_sizes_and_partition() {
        let cohort: Vec<PatientRecord> = (0..10).map(|i| patient(&i.to_string(), (i % 2) as u8)).collect();
        let s = split_cohort(&cohort, SplitFractions::default(), 3, false).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        let mut ids: Vec<String> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .map(|p| p.patient_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn stratified_split_keeps_ratio() {
        // 10 of 40 positive: counting oracle gives 6/2/2 positives per split.
        let cohort: Vec<PatientRecord> =
            (0..40).map(|i| patient(&i.to_string(), u8::from(i < 10))).collect();
        let s = split_cohort(&cohort, SplitFractions::default(), 5, true).unwrap();
        for (part, size) in [(&s.train, 24usize), (&s.valid, 8), (&s.test, 8)] {
            assert_eq!(part.len(), size);
            let pos = part.iter().filter(|p| p.is_case()).count() as f64;
            assert!((pos - 0.25 * size as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn degenerate_fractions_rejected() {
        assert!(SplitFractions::new(0.8, 0.2, 0.0).is_err());
        assert!(SplitFractions::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitFractions::parse("0.6,0.2").is_err());
        assert_eq!(SplitFractions::parse("0.6, 0.2,0.2").unwrap(), SplitFractions::default());
    }
}
