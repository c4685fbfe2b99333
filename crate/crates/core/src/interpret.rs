//! Contribution coefficients and their patient- and cohort-level aggregates.
//!
//! With every attention weight from a forward pass held fixed, the logit is
//! linear in the code embeddings, so it splits exactly into one term per
//! code occurrence:
//!
//! ```text
//! w_ijk = α^t_i · α^v_ij · α^c_ijk · (W · e_ijk)
//! logit = Σ_ijk w_ijk + b
//! ```
//!
//! Without type attention `α^t_i` is 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{IhanError, Result};
use crate::model::{AttentionTrace, IhanParams};
use crate::vocab::CodeType;

/// Rows with `|contribution|` at or below this are hidden from reports by default.
pub const DISPLAY_THRESHOLD: f64 = 0.01;

/// Default patient floor for the cohort-level table.
pub const DEFAULT_MIN_PATIENTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionEntry {
    pub patient_id: String,
    pub date: NaiveDate,
    pub code_type: CodeType,
    pub code: String,
    pub description: Option<String>,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub patient_id: String,
    pub entries: Vec<ContributionEntry>,
    pub bias: f64,
    pub prediction: f64,
}

impl ContributionReport {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.contribution).sum()
    }

    /// `Σ w + b`, which reproduces the model logit.
    pub fn logit(&self) -> f64 {
        self.total() + self.bias
    }

    /// Entries by date, then by descending magnitude.
    pub fn sorted_entries(&self) -> Vec<&ContributionEntry> {
        let mut rows: Vec<&ContributionEntry> = self.entries.iter().collect();
        rows.sort_by(|a, b| {
            a.date
                .cmp(&b.date)
                .then(b.contribution.abs().total_cmp(&a.contribution.abs()))
        });
        rows
    }
}

/// Decomposes the logit of `trace` into one coefficient per encoded code occurrence.
pub fn contributions(
    params: &IhanParams,
    patient: &PatientRecord,
    trace: &AttentionTrace,
) -> Result<ContributionReport> {
    let expected_types = if params.type_attn.is_some() {
        params.encoders.len()
    } else {
        1
    };
    if trace.type_weights.len() != expected_types {
        return Err(IhanError::Consistency(format!(
            "{} type weights for {} expected",
            trace.type_weights.len(),
            expected_types
        )));
    }
    let head = params.head_weights();
    let mut entries = Vec::new();
    for (c, channel) in trace.channels.iter().enumerate() {
        let encoder = params.encoder_for(channel.scope).ok_or_else(|| {
            IhanError::Consistency(format!("no encoder for {:?}", channel.scope))
        })?;
        let grouping = params.group(encoder, patient);
        if grouping.encounter_indices != channel.encounter_indices
            || grouping.code_positions != channel.code_positions
        {
            return Err(IhanError::Consistency(format!(
                "encounter grouping for {:?} differs from patient {}",
                channel.scope, patient.patient_id
            )));
        }
        let n = channel.encounter_indices.len();
        if channel.visit_weights.len() != n || channel.code_weights.len() != n {
            return Err(IhanError::Consistency(format!(
                "{n} encounters but {} visit and {} code weight groups",
                channel.visit_weights.len(),
                channel.code_weights.len()
            )));
        }
        let type_w = if params.type_attn.is_some() {
            trace.type_weight_of(c, &params.encoders)
        } else {
            trace.type_weights[0]
        };
        let table = params.store.get(encoder.params.emb.weights);
        let dim = table.rows();
        let width = table.cols();
        for (jj, &j) in channel.encounter_indices.iter().enumerate() {
            let enc = &patient.encounters[j];
            let positions = &channel.code_positions[jj];
            let alphas = &channel.code_weights[jj];
            if alphas.len() != positions.len() {
                return Err(IhanError::Consistency(format!(
                    "encounter {j}: {} codes but {} code weights",
                    positions.len(),
                    alphas.len()
                )));
            }
            let visit_w = channel.visit_weights[jj];
            for (&k, &alpha_c) in positions.iter().zip(alphas) {
                let code = &enc.codes[k];
                let col = encoder.vocab.lookup(code.code_type, &code.code);
                let mut head_dot_e = 0.0;
                for r in 0..dim {
                    head_dot_e += head.data()[r] * table.data()[r * width + col];
                }
                entries.push(ContributionEntry {
                    patient_id: patient.patient_id.clone(),
                    date: enc.date,
                    code_type: code.code_type,
                    code: code.code.clone(),
                    description: code.description.clone(),
                    contribution: type_w * visit_w * alpha_c * head_dot_e,
                });
            }
        }
    }
    Ok(ContributionReport {
        patient_id: patient.patient_id.clone(),
        entries,
        bias: params.head_bias(),
        prediction: trace.prediction,
    })
}

/// Forward pass followed by [`contributions`].
pub fn explain(params: &IhanParams, patient: &PatientRecord) -> Result<ContributionReport> {
    let (_, trace) = params.forward(patient)?;
    contributions(params, patient, &trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCodeRow {
    pub code_type: CodeType,
    pub code: String,
    pub description: Option<String>,
    pub contribution: f64,
}

/// Sums each code's coefficients over encounters, ordered by type then code.
pub fn aggregate_patient_code(report: &ContributionReport) -> Vec<PatientCodeRow> {
    let mut groups: BTreeMap<(CodeType, &str), PatientCodeRow> = BTreeMap::new();
    for e in &report.entries {
        let row = groups
            .entry((e.code_type, e.code.as_str()))
            .or_insert_with(|| PatientCodeRow {
                code_type: e.code_type,
                code: e.code.clone(),
                description: None,
                contribution: 0.0,
            });
        row.contribution += e.contribution;
        if row.description.is_none() {
            row.description = e.description.clone();
        }
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeLevelRow {
    pub code_type: CodeType,
    pub code: String,
    pub n_patients: usize,
    pub mean_contribution: f64,
}

/// Mean per-patient cumulative contribution of each code across `reports`.
///
/// Codes seen in fewer than `min_patients` patients are dropped. Rows are ordered
/// by mean descending, then patient count descending, then code ascending.
pub fn aggregate_code_level(reports: &[ContributionReport], min_patients: usize) -> Vec<CodeLevelRow> {
    let mut sums: HashMap<(CodeType, String), (f64, BTreeSet<&str>)> = HashMap::new();
    for r in reports {
        for row in aggregate_patient_code(r) {
            let slot = sums
                .entry((row.code_type, row.code))
                .or_insert_with(|| (0.0, BTreeSet::new()));
            slot.0 += row.contribution;
            slot.1.insert(r.patient_id.as_str());
        }
    }
    let mut rows: Vec<CodeLevelRow> = sums
        .into_iter()
        .filter(|(_, (_, pts))| pts.len() >= min_patients)
        .map(|((code_type, code), (total, pts))| CodeLevelRow {
            code_type,
            code,
            n_patients: pts.len(),
            mean_contribution: total / pts.len() as f64,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_contribution
            .total_cmp(&a.mean_contribution)
            .then(b.n_patients.cmp(&a.n_patients))
            .then_with(|| a.code.cmp(&b.code))
            .then(a.code_type.cmp(&b.code_type))
    });
    rows
}

fn shown(contribution: f64, all: bool) -> bool {
    all || contribution.abs() > DISPLAY_THRESHOLD
}

#[derive(Serialize)]
struct EncounterCsvRow<'a> {
    patient_id: &'a str,
    date: String,
    code_type: CodeType,
    code: &'a str,
    description: &'a str,
    contribution: f64,
}

/// Encounter-level table: `patient_id,date,code_type,code,description,contribution`.
pub fn write_encounter_csv(w: impl Write, report: &ContributionReport, all: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in report.sorted_entries() {
        if !shown(e.contribution, all) {
            continue;
        }
        out.serialize(EncounterCsvRow {
            patient_id: &e.patient_id,
            date: e.date.to_string(),
            code_type: e.code_type,
            code: &e.code,
            description: e.description.as_deref().unwrap_or(""),
            contribution: e.contribution,
        })
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PatientCsvRow<'a> {
    code_type: CodeType,
    code: &'a str,
    contribution: f64,
}

/// Patient-level table: `code_type,code,contribution`.
pub fn write_patient_csv(w: impl Write, rows: &[PatientCodeRow], all: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows.iter().filter(|r| shown(r.contribution, all)) {
        out.serialize(PatientCsvRow {
            code_type: r.code_type,
            code: &r.code,
            contribution: r.contribution,
        })
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Cohort-level table: `code_type,code,n_patients,mean_contribution`.
pub fn write_code_level_csv(w: impl Write, rows: &[CodeLevelRow], all: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows.iter().filter(|r| shown(r.mean_contribution, all)) {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> IhanError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IhanError::Io(io),
        other => IhanError::Config(format!("csv: {other:?}")),
    }
}
