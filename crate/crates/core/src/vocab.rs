//! Code vocabularies and the embedding lookup that stands in for `W · onehot(code)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeType {
    Diag,
    Proc,
    Lab,
    Rx,
}

impl CodeType {
    pub const ALL: [CodeType; 4] = [CodeType::Diag, CodeType::Proc, CodeType::Lab, CodeType::Rx];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeType::Diag => "diag",
            CodeType::Proc => "proc",
            CodeType::Lab => "lab",
            CodeType::Rx => "rx",
        }
    }
}

impl fmt::Display for CodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeType {
    type Err = IhanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(CodeType::Diag),
            "proc" => Ok(CodeType::Proc),
            "lab" => Ok(CodeType::Lab),
            "rx" => Ok(CodeType::Rx),
            other => Err(IhanError::Config(format!("unknown code type {other:?}"))),
        }
    }
}

/// Parses a comma-separated list such as `diag,lab,rx`.
pub fn parse_type_list(s: &str) -> Result<Vec<CodeType>> {
    let mut out: Vec<CodeType> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: CodeType = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(IhanError::Config("empty code-type list".into()));
    }
    Ok(out)
}

/// Which codes a vocabulary covers: one type, or every type under `type:code` names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabScope {
    Type(CodeType),
    Combined,
}

impl VocabScope {
    pub fn key(self, code_type: CodeType, code: &str) -> String {
        match self {
            VocabScope::Type(_) => code.to_string(),
            VocabScope::Combined => namespaced(code_type, code),
        }
    }

    pub fn admits(self, code_type: CodeType) -> bool {
        match self {
            VocabScope::Type(t) => t == code_type,
            VocabScope::Combined => true,
        }
    }
}

pub fn namespaced(code_type: CodeType, code: &str) -> String {
    format!("{code_type}:{code}")
}

/// Frozen code→index map with a trailing UNK slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    scope: VocabScope,
    codes: Vec<String>,
    min_count: usize,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Codes of `code_type` seen at least `min_count` times, indexed in first-appearance order.
    pub fn build<'a, I>(corpus: I, code_type: CodeType, min_count: usize) -> Self
    where
        I: IntoIterator<Item = (CodeType, &'a str)>,
    {
        Self::build_scoped(corpus, VocabScope::Type(code_type), min_count)
    }

    /// One vocabulary over all types, keyed by `type:code`.
    pub fn build_combined<'a, I>(corpus: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = (CodeType, &'a str)>,
    {
        Self::build_scoped(corpus, VocabScope::Combined, min_count)
    }

    pub fn build_scoped<'a, I>(corpus: I, scope: VocabScope, min_count: usize) -> Self
    where
        I: IntoIterator<Item = (CodeType, &'a str)>,
    {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for (t, code) in corpus {
            if !scope.admits(t) {
                continue;
            }
            let key = scope.key(t, code);
            let c = counts.entry(key.clone()).or_insert(0);
            if *c == 0 {
                order.push(key);
            }
            *c += 1;
        }
        if order.is_empty() {
            log::warn!("vocabulary for {scope:?} built from an empty corpus; only UNK present");
        }
        let codes = order
            .into_iter()
            .filter(|k| counts[k] >= min_count.max(1))
            .collect();
        Self::from_codes(scope, codes, min_count)
    }

    /// Rebuilds a vocabulary from its index-ordered code list.
    pub fn from_codes(scope: VocabScope, codes: Vec<String>, min_count: usize) -> Self {
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Vocabulary {
            scope,
            codes,
            min_count,
            index,
        }
    }

    pub fn scope(&self) -> VocabScope {
        self.scope
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Number of rows in the embedding table, UNK included.
    pub fn size(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn unk_index(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    /// Index of an already-keyed code (namespaced when the scope is combined).
    pub fn lookup_key(&self, key: &str) -> usize {
        self.index.get(key).copied().unwrap_or(self.codes.len())
    }

    pub fn lookup(&self, code_type: CodeType, code: &str) -> usize {
        match self.scope {
            VocabScope::Type(_) => self.lookup_key(code),
            VocabScope::Combined => self.lookup_key(&namespaced(code_type, code)),
        }
    }

    /// Code at `index`, or `None` for UNK and out-of-range indices.
    pub fn code(&self, index: usize) -> Option<&str> {
        self.codes.get(index).map(String::as_str)
    }

}

/// Serialized form: codes in index order plus the UNK slot, which must follow them.
#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    scope: VocabScope,
    codes: Vec<String>,
    unk_index: usize,
    min_count: usize,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = String;

    fn try_from(r: VocabularyRepr) -> std::result::Result<Self, String> {
        if r.unk_index != r.codes.len() {
            return Err(format!(
                "unk index {} must equal the number of codes {}",
                r.unk_index,
                r.codes.len()
            ));
        }
        let v = Vocabulary::from_codes(r.scope, r.codes, r.min_count);
        if v.index.len() != v.codes.len() {
            return Err("duplicate codes in vocabulary".into());
        }
        Ok(v)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            unk_index: v.unk_index(),
            scope: v.scope,
            codes: v.codes,
            min_count: v.min_count,
        }
    }
}

/// d × V embedding table registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub weights: ParamId,
    pub dim: usize,
    pub vocab_size: usize,
}

impl EmbeddingMatrix {
    /// Uniform init in `[-1/√d, 1/√d]`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * vocab_size)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let weights = store.add(name, Tensor::from_vec(dim, vocab_size, data).expect("sized"));
        EmbeddingMatrix {
            weights,
            dim,
            vocab_size,
        }
    }

    pub fn bind(store: &ParamStore, id: ParamId) -> Self {
        let (dim, vocab_size) = store.get(id).shape();
        EmbeddingMatrix {
            weights: id,
            dim,
            vocab_size,
        }
    }

    /// Column `index` as a d×1 tensor, outside any tape.
    pub fn column(&self, store: &ParamStore, index: usize) -> Tensor {
        store.get(self.weights).column_at(index)
    }
}

/// `e = W_emb · onehot(lookup(code))`, recorded on the tape as a single-column read.
pub fn embed(
    tape: &mut Tape<'_>,
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    code_type: CodeType,
    code: &str,
) -> Result<Var> {
    if emb.vocab_size != vocab.size() {
        return Err(IhanError::dim(
            "embed",
            (emb.dim, emb.vocab_size),
            (emb.dim, vocab.size()),
        ));
    }
    Ok(tape.param_column(emb.weights, vocab.lookup(code_type, code)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(codes: &[&'static str]) -> Vec<(CodeType, &'static str)> {
        codes.iter().map(|c| (CodeType::Diag, *c)).collect()
    }

    #[test]
    fn first_appearance_order_with_trailing_unk() {
        let v = Vocabulary::build(diag(&["A", "B", "A"]), CodeType::Diag, 1);
        assert_eq!(v.lookup(CodeType::Diag, "A"), 0);
        assert_eq!(v.lookup(CodeType::Diag, "B"), 1);
        assert_eq!(v.unk_index(), 2);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build(diag(&["A", "B", "A"]), CodeType::Diag, 2);
        assert_eq!(v.lookup(CodeType::Diag, "A"), 0);
        assert_eq!(v.unk_index(), 1);
        assert_eq!(v.lookup(CodeType::Diag, "B"), v.unk_index());
    }

    #[test]
    fn empty_corpus_has_only_unk() {
        let v = Vocabulary::build(Vec::new(), CodeType::Lab, 1);
        assert_eq!(v.size(), 1);
        assert_eq!(v.lookup(CodeType::Lab, "x"), 0);
    }

    #[test]
    fn other_types_are_ignored() {
        let corpus = vec![(CodeType::Rx, "A"), (CodeType::Diag, "B")];
        let v = Vocabulary::build(corpus, CodeType::Diag, 1);
        assert_eq!(v.codes(), &["B".to_string()]);
    }

    #[test]
    fn combined_scope_separates_types() {
        let corpus = vec![(CodeType::Rx, "A"), (CodeType::Diag, "A")];
        let v = Vocabulary::build_combined(corpus, 1);
        assert_eq!(v.size(), 3);
        assert_ne!(v.lookup(CodeType::Rx, "A"), v.lookup(CodeType::Diag, "A"));
        assert_eq!(v.code(0), Some("rx:A"));
    }

    #[test]
    fn large_vocabulary_size() {
        let codes: Vec<String> = (0..45_937).map(|i| format!("D{i:05}")).collect();
        let v = Vocabulary::build(
            codes.iter().map(|c| (CodeType::Diag, c.as_str())),
            CodeType::Diag,
            1,
        );
        assert_eq!(v.size(), 45_938);
    }

    #[test]
    fn embed_equals_onehot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Vocabulary::build(diag(&["A", "B", "C"]), CodeType::Diag, 1);
        let mut store = ParamStore::new();
        let emb = EmbeddingMatrix::init(&mut store, "emb", 6, v.size(), &mut rng);
        let mut tape = Tape::new(&store);
        for code in ["A", "B", "C", "never-seen"] {
            let e = embed(&mut tape, &v, &emb, CodeType::Diag, code).unwrap();
            let idx = v.lookup(CodeType::Diag, code);
            let oracle = store
                .get(emb.weights)
                .matmul(&Tensor::one_hot(v.size(), idx))
                .unwrap();
            assert_eq!(tape.value(e), &oracle);
        }
        let unk = embed(&mut tape, &v, &emb, CodeType::Diag, "never-seen").unwrap();
        assert_eq!(tape.value(unk), &emb.column(&store, v.unk_index()));
    }

    #[test]
    fn embed_checks_table_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Vocabulary::build(diag(&["A"]), CodeType::Diag, 1);
        let mut store = ParamStore::new();
        let emb = EmbeddingMatrix::init(&mut store, "emb", 4, 7, &mut rng);
        let mut tape = Tape::new(&store);
        assert!(embed(&mut tape, &v, &emb, CodeType::Diag, "A").is_err());
    }

    #[test]
    fn type_list_parsing() {
        assert_eq!(
            parse_type_list("diag, lab,diag").unwrap(),
            vec![CodeType::Diag, CodeType::Lab]
        );
        assert!(parse_type_list("diag,xray").is_err());
        assert!(parse_type_list("").is_err());
    }
}
