//! The hierarchical attention forward pass.
//!
//! Per channel (one code type, or all types merged):
//!
//! ```text
//! e_jk   = W_emb · onehot(x_jk)
//! α^c_j  = softmax(W_c E_j + b_c)            code attention within encounter j
//! v_j    = Σ_k α^c_jk e_jk
//! h_1..J = GRU(v_1..v_J)
//! α^v    = softmax(W_v H + b_v)              visit attention
//! m      = Σ_j α^v_j v_j                      weighted over v_j, not h_j
//! ```
//!
//! `algorithm_comb` adds `α^t = softmax(W_t M + b_t)` over the per-type `m_i`
//! (types absent from the record are masked out) and `m = Σ_i α^t_i m_i`.
//! Every mode ends in `ŷ = σ(W m + b)`.
//!
//! Because the value path (`e → v → m → logit`) is linear once the attention
//! weights are fixed, the logit splits exactly into per-code contributions;
//! see [`crate::interpret`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Code, PatientRecord};
use crate::error::{IhanError, Result};
use crate::gru::GruParams;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{embed, CodeType, EmbeddingMatrix, VocabScope, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleType,
    AlgorithmComb,
    DataComb,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SingleType => "single_type",
            Mode::AlgorithmComb => "algorithm_comb",
            Mode::DataComb => "data_comb",
        }
    }

    /// A single active type always runs the single-type model.
    pub fn resolve(self, active_types: &[CodeType]) -> Result<Mode> {
        match (self, active_types.len()) {
            (_, 0) => Err(IhanError::Config("no active code types".into())),
            (_, 1) => Ok(Mode::SingleType),
            (Mode::SingleType, n) => Err(IhanError::Config(format!(
                "single_type mode takes one code type, got {n}"
            ))),
            (m, _) => Ok(m),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = IhanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_type" => Ok(Mode::SingleType),
            "algorithm_comb" => Ok(Mode::AlgorithmComb),
            "data_comb" => Ok(Mode::DataComb),
            other => Err(IhanError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Parameters of one single-channel encoder: embedding, code attention, GRU, visit attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleTypeParams {
    pub emb: EmbeddingMatrix,
    pub code_w: ParamId,
    pub code_b: ParamId,
    pub gru: GruParams,
    pub visit_w: ParamId,
    pub visit_b: ParamId,
}

impl SingleTypeParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        embedding_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let emb = EmbeddingMatrix::init(store, &format!("{prefix}.emb"), embedding_dim, vocab_size, rng);
        let code_w = store.add(
            format!("{prefix}.code_attn.w"),
            uniform_row(embedding_dim, rng),
        );
        let code_b = store.add(format!("{prefix}.code_attn.b"), Tensor::scalar(0.0));
        let gru = GruParams::init(store, prefix, embedding_dim, hidden_dim, rng);
        let visit_w = store.add(format!("{prefix}.visit_attn.w"), uniform_row(hidden_dim, rng));
        let visit_b = store.add(format!("{prefix}.visit_attn.b"), Tensor::scalar(0.0));
        SingleTypeParams {
            emb,
            code_w,
            code_b,
            gru,
            visit_w,
            visit_b,
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(&format!("{prefix}.{name}"))
                .ok_or_else(|| IhanError::Checkpoint(format!("missing {prefix}.{name}")))
        };
        Ok(SingleTypeParams {
            emb: EmbeddingMatrix::bind(store, find("emb")?),
            code_w: find("code_attn.w")?,
            code_b: find("code_attn.b")?,
            gru: GruParams::bind(store, prefix)?,
            visit_w: find("visit_attn.w")?,
            visit_b: find("visit_attn.b")?,
        })
    }

    /// Code attention and encounter representation: returns `(v, α^c)`.
    pub fn encode_encounter(
        &self,
        tape: &mut Tape<'_>,
        vocab: &Vocabulary,
        codes: &[&Code],
    ) -> Result<(Var, Var)> {
        if codes.is_empty() {
            return Err(IhanError::Degenerate("encounter without codes".into()));
        }
        let cols = codes
            .iter()
            .map(|c| embed(tape, vocab, &self.emb, c.code_type, &c.code))
            .collect::<Result<Vec<_>>>()?;
        let e = tape.hstack(&cols)?;
        let w = tape.param(self.code_w);
        let b = tape.param(self.code_b);
        let scores = tape.matmul(w, e)?;
        let scores = tape.add_scalar(scores, b)?;
        let alpha = tape.masked_softmax(scores, &vec![true; codes.len()])?;
        let alpha_t = tape.transpose(alpha);
        let v = tape.matmul(e, alpha_t)?;
        Ok((v, alpha))
    }

    /// GRU over encounter representations and visit attention: returns `(m, α^v)`.
    pub fn encode_sequence(&self, tape: &mut Tape<'_>, reprs: &[Var]) -> Result<(Var, Var)> {
        if reprs.is_empty() {
            return Err(IhanError::Degenerate("no non-empty encounters".into()));
        }
        let hidden = self.gru.run(tape, reprs)?;
        let h = tape.hstack(&hidden)?;
        let w = tape.param(self.visit_w);
        let b = tape.param(self.visit_b);
        let scores = tape.matmul(w, h)?;
        let scores = tape.add_scalar(scores, b)?;
        let alpha = tape.masked_softmax(scores, &vec![true; reprs.len()])?;
        let v = tape.hstack(reprs)?;
        let alpha_t = tape.transpose(alpha);
        let m = tape.matmul(v, alpha_t)?;
        Ok((m, alpha))
    }

    /// Single-channel member representation over pre-grouped encounters.
    pub fn encode_patient(
        &self,
        tape: &mut Tape<'_>,
        vocab: &Vocabulary,
        encounters: &[Vec<&Code>],
    ) -> Result<ChannelVars> {
        let mut reprs = Vec::new();
        let mut code_attn = Vec::new();
        for codes in encounters.iter().filter(|c| !c.is_empty()) {
            let (v, a) = self.encode_encounter(tape, vocab, codes)?;
            reprs.push(v);
            code_attn.push(a);
        }
        let (member, visit_attn) = self.encode_sequence(tape, &reprs)?;
        Ok(ChannelVars {
            reprs,
            code_attn,
            member,
            visit_attn,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb.weights, self.code_w, self.code_b];
        ids.extend(self.gru.param_ids());
        ids.extend([self.visit_w, self.visit_b]);
        ids
    }
}

/// Tape handles produced by one channel encoder.
#[derive(Debug, Clone)]
pub struct ChannelVars {
    pub reprs: Vec<Var>,
    pub code_attn: Vec<Var>,
    pub member: Var,
    pub visit_attn: Var,
}

fn uniform_row(n: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (n as f64).sqrt();
    Tensor::row((0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

/// A channel encoder together with the vocabulary that feeds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub params: SingleTypeParams,
}

impl Encoder {
    pub fn scope(&self) -> VocabScope {
        self.vocab.scope()
    }
}

fn scope_prefix(scope: VocabScope) -> String {
    match scope {
        VocabScope::Type(t) => t.to_string(),
        VocabScope::Combined => "combined".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding_dim: 128,
            hidden_dim: 128,
        }
    }
}

/// The full parameter inventory of one configuration plus its vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct IhanParams {
    pub mode: Mode,
    pub active_types: Vec<CodeType>,
    pub dims: ModelDims,
    pub encoders: Vec<Encoder>,
    /// `(W_t, b_t)`, present only for `algorithm_comb`.
    pub type_attn: Option<(ParamId, ParamId)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub store: ParamStore,
}

/// Per-channel portion of an [`AttentionTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub scope: VocabScope,
    /// Indices into `patient.encounters` of the encounters this channel saw, in order.
    pub encounter_indices: Vec<usize>,
    /// For each of those encounters, the positions in `Encounter::codes` that were encoded.
    pub code_positions: Vec<Vec<usize>>,
    /// `α^c`, aligned with `code_positions`.
    pub code_weights: Vec<Vec<f64>>,
    /// `α^v`, aligned with `encounter_indices`.
    pub visit_weights: Vec<f64>,
    /// `v_j`, aligned with `encounter_indices`.
    pub encounter_reprs: Vec<Tensor>,
    pub member: Tensor,
}

/// Every attention weight and representation from one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// One entry per channel that had codes; absent types are skipped.
    pub channels: Vec<ChannelTrace>,
    /// `α^t`, one per encoder (0 for absent types); `[1.0]` without type attention.
    pub type_weights: Vec<f64>,
    pub member: Tensor,
    pub logit: f64,
    pub prediction: f64,
}

impl AttentionTrace {
    /// Type weight applying to `channel`.
    pub fn type_weight_of(&self, channel: usize, encoders: &[Encoder]) -> f64 {
        let scope = self.channels[channel].scope;
        encoders
            .iter()
            .position(|e| e.scope() == scope)
            .and_then(|i| self.type_weights.get(i).copied())
            .unwrap_or(1.0)
    }
}

/// Tape handles for a full forward pass.
pub struct ForwardVars {
    pub prediction: Var,
    pub logit: Var,
    pub member: Var,
    pub type_attn: Option<Var>,
    /// `(encoder index, grouping, vars)` for every channel that had codes.
    pub channels: Vec<(usize, ChannelGrouping, ChannelVars)>,
}

/// How a patient's encounters were grouped for one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub encounter_indices: Vec<usize>,
    pub code_positions: Vec<Vec<usize>>,
}

impl IhanParams {
    /// Fresh parameters for `mode` over the given per-channel vocabularies.
    pub fn init(
        mode: Mode,
        active_types: &[CodeType],
        vocabs: Vec<Vocabulary>,
        dims: ModelDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mode = mode.resolve(active_types)?;
        let expected: Vec<VocabScope> = match mode {
            Mode::DataComb => vec![VocabScope::Combined],
            _ => active_types.iter().map(|&t| VocabScope::Type(t)).collect(),
        };
        let got: Vec<VocabScope> = vocabs.iter().map(Vocabulary::scope).collect();
        if got != expected {
            return Err(IhanError::Config(format!(
                "vocabularies {got:?} do not match {mode} over {active_types:?}"
            )));
        }
        let mut store = ParamStore::new();
        let encoders = vocabs
            .into_iter()
            .map(|vocab| {
                let params = SingleTypeParams::init(
                    &mut store,
                    &scope_prefix(vocab.scope()),
                    vocab.size(),
                    dims.embedding_dim,
                    dims.hidden_dim,
                    rng,
                );
                Encoder { vocab, params }
            })
            .collect();
        let type_attn = (mode == Mode::AlgorithmComb).then(|| {
            let w = store.add("type_attn.w", uniform_row(dims.embedding_dim, rng));
            let b = store.add("type_attn.b", Tensor::scalar(0.0));
            (w, b)
        });
        let head_w = store.add("head.w", uniform_row(dims.embedding_dim, rng));
        let head_b = store.add("head.b", Tensor::scalar(0.0));
        Ok(IhanParams {
            mode,
            active_types: active_types.to_vec(),
            dims,
            encoders,
            type_attn,
            head_w,
            head_b,
            store,
        })
    }

    /// Builds vocabularies from `train` and initialises parameters.
    pub fn from_training_data(
        mode: Mode,
        active_types: &[CodeType],
        train: &[PatientRecord],
        min_count: usize,
        dims: ModelDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mode = mode.resolve(active_types)?;
        let corpus = || crate::data::corpus(train);
        let vocabs = match mode {
            Mode::DataComb => vec![Vocabulary::build_combined(
                corpus().filter(|(t, _)| active_types.contains(t)),
                min_count,
            )],
            _ => active_types
                .iter()
                .map(|&t| Vocabulary::build(corpus(), t, min_count))
                .collect(),
        };
        Self::init(mode, active_types, vocabs, dims, rng)
    }

    /// Re-attaches named tensors from a checkpoint.
    pub fn bind(
        mode: Mode,
        active_types: Vec<CodeType>,
        vocabs: Vec<Vocabulary>,
        store: ParamStore,
    ) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| IhanError::Checkpoint(format!("missing {name}")))
        };
        let encoders = vocabs
            .into_iter()
            .map(|vocab| {
                let params = SingleTypeParams::bind(&store, &scope_prefix(vocab.scope()))?;
                if params.emb.vocab_size != vocab.size() {
                    return Err(IhanError::Checkpoint(format!(
                        "embedding width {} does not match vocabulary size {}",
                        params.emb.vocab_size,
                        vocab.size()
                    )));
                }
                Ok(Encoder { vocab, params })
            })
            .collect::<Result<Vec<_>>>()?;
        let type_attn = if mode == Mode::AlgorithmComb {
            Some((find("type_attn.w")?, find("type_attn.b")?))
        } else {
            None
        };
        let head_w = find("head.w")?;
        let head_b = find("head.b")?;
        let first = encoders
            .first()
            .ok_or_else(|| IhanError::Checkpoint("no encoders".into()))?;
        let dims = ModelDims {
            embedding_dim: first.params.emb.dim,
            hidden_dim: first.params.gru.hidden_dim,
        };
        Ok(IhanParams {
            mode,
            active_types,
            dims,
            encoders,
            type_attn,
            head_w,
            head_b,
            store,
        })
    }

    /// Groups a patient's encounters for one encoder, keeping only encounters
    /// with at least one admitted code.
    pub fn group(&self, encoder: &Encoder, patient: &PatientRecord) -> ChannelGrouping {
        let scope = encoder.scope();
        let mut grouping = ChannelGrouping {
            encounter_indices: Vec::new(),
            code_positions: Vec::new(),
        };
        for (j, enc) in patient.encounters.iter().enumerate() {
            let positions: Vec<usize> = enc
                .codes
                .iter()
                .enumerate()
                .filter(|(_, c)| scope.admits(c.code_type) && self.active_types.contains(&c.code_type))
                .map(|(k, _)| k)
                .collect();
            if !positions.is_empty() {
                grouping.encounter_indices.push(j);
                grouping.code_positions.push(positions);
            }
        }
        grouping
    }

    /// Records the forward pass for `patient` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, patient: &PatientRecord) -> Result<ForwardVars> {
        let mut channels = Vec::new();
        for (i, encoder) in self.encoders.iter().enumerate() {
            let grouping = self.group(encoder, patient);
            if grouping.encounter_indices.is_empty() {
                continue;
            }
            let encounters: Vec<Vec<&Code>> = grouping
                .encounter_indices
                .iter()
                .zip(&grouping.code_positions)
                .map(|(&j, pos)| pos.iter().map(|&k| &patient.encounters[j].codes[k]).collect())
                .collect();
            let vars = encoder.params.encode_patient(tape, &encoder.vocab, &encounters)?;
            channels.push((i, grouping, vars));
        }
        if channels.is_empty() {
            return Err(IhanError::Degenerate(format!(
                "patient {} has no codes of the active types {:?}",
                patient.patient_id, self.active_types
            )));
        }

        let (member, type_attn) = match self.type_attn {
            Some((tw, tb)) => {
                let d = self.dims.embedding_dim;
                let zero = tape.input(Tensor::zeros(d, 1));
                let mut cols = vec![zero; self.encoders.len()];
                let mut mask = vec![false; self.encoders.len()];
                for (i, _, vars) in &channels {
                    cols[*i] = vars.member;
                    mask[*i] = true;
                }
                let m_all = tape.hstack(&cols)?;
                let w = tape.param(tw);
                let b = tape.param(tb);
                let scores = tape.matmul(w, m_all)?;
                let scores = tape.add_scalar(scores, b)?;
                let alpha = tape.masked_softmax(scores, &mask)?;
                let alpha_t = tape.transpose(alpha);
                (tape.matmul(m_all, alpha_t)?, Some(alpha))
            }
            None => (channels[0].2.member, None),
        };

        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        let logit = tape.matmul(w, member)?;
        let logit = tape.add(logit, b)?;
        let prediction = tape.sigmoid(logit);
        Ok(ForwardVars {
            prediction,
            logit,
            member,
            type_attn,
            channels,
        })
    }

    /// Prediction and full attention trace.
    pub fn forward(&self, patient: &PatientRecord) -> Result<(f64, AttentionTrace)> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward_on_tape(&mut tape, patient)?;
        let trace = self.read_trace(&tape, &vars);
        Ok((trace.prediction, trace))
    }

    pub fn predict(&self, patient: &PatientRecord) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward_on_tape(&mut tape, patient)?;
        Ok(tape.value(vars.prediction).item())
    }

    /// BCE loss node for one labelled patient.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, patient: &PatientRecord) -> Result<Var> {
        let vars = self.forward_on_tape(tape, patient)?;
        tape.bce(vars.prediction, f64::from(patient.label))
    }

    pub fn read_trace(&self, tape: &Tape<'_>, vars: &ForwardVars) -> AttentionTrace {
        let channels = vars
            .channels
            .iter()
            .map(|(i, grouping, cv)| ChannelTrace {
                scope: self.encoders[*i].scope(),
                encounter_indices: grouping.encounter_indices.clone(),
                code_positions: grouping.code_positions.clone(),
                code_weights: cv
                    .code_attn
                    .iter()
                    .map(|a| tape.value(*a).data().to_vec())
                    .collect(),
                visit_weights: tape.value(cv.visit_attn).data().to_vec(),
                encounter_reprs: cv.reprs.iter().map(|v| tape.value(*v).clone()).collect(),
                member: tape.value(cv.member).clone(),
            })
            .collect();
        let type_weights = match vars.type_attn {
            Some(a) => tape.value(a).data().to_vec(),
            None => vec![1.0],
        };
        AttentionTrace {
            channels,
            type_weights,
            member: tape.value(vars.member).clone(),
            logit: tape.value(vars.logit).item(),
            prediction: tape.value(vars.prediction).item(),
        }
    }

    pub fn head_weights(&self) -> &Tensor {
        self.store.get(self.head_w)
    }

    pub fn head_bias(&self) -> f64 {
        self.store.get(self.head_b).item()
    }

    pub fn set_head_bias(&mut self, b: f64) {
        *self.store.get_mut(self.head_b) = Tensor::scalar(b);
    }

    pub fn encoder_for(&self, scope: VocabScope) -> Option<&Encoder> {
        self.encoders.iter().find(|e| e.scope() == scope)
    }
}
