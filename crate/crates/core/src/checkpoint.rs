//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `IHANCKPT`, a little-endian `u64` header length, a
//! JSON header, then one section per tensor in header order (`u64` byte length
//! followed by row-major little-endian `f64`s). The header's first field after
//! the version is a fixed-width `saved_at` timestamp; nothing else in the file
//! depends on wall-clock time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};
use crate::model::{IhanParams, Mode, ModelDims};
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::vocab::{CodeType, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 8] = b"IHANCKPT";
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const SAVED_AT_KEY: &str = "\"saved_at\":\"";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    saved_at: String,
    mode: Mode,
    active_types: Vec<CodeType>,
    dims: ModelDims,
    vocabularies: Vec<Vocabulary>,
    tensors: Vec<TensorEntry>,
    train_config: Option<TrainConfig>,
    metrics: BTreeMap<String, f64>,
}

/// A loaded checkpoint: parameters plus the metadata saved with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: IhanParams,
    pub train_config: Option<TrainConfig>,
    pub metrics: BTreeMap<String, f64>,
    pub saved_at: String,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().format(TIMESTAMP_FORMAT).to_string()
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &IhanParams,
    train_config: Option<&TrainConfig>,
    metrics: &BTreeMap<String, f64>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params, train_config, metrics, &now_timestamp())?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(
    mut w: impl Write,
    params: &IhanParams,
    train_config: Option<&TrainConfig>,
    metrics: &BTreeMap<String, f64>,
    saved_at: &str,
) -> Result<()> {
    if chrono::NaiveDateTime::parse_from_str(saved_at, TIMESTAMP_FORMAT).is_err() {
        return Err(IhanError::Checkpoint(format!(
            "timestamp {saved_at:?} is not of the form YYYY-MM-DDTHH:MM:SSZ"
        )));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        saved_at: saved_at.to_string(),
        mode: params.mode,
        active_types: params.active_types.clone(),
        dims: params.dims,
        vocabularies: params.encoders.iter().map(|e| e.vocab.clone()).collect(),
        tensors: params
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        train_config: train_config.cloned(),
        metrics: metrics.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, t) in params.store.iter() {
        w.write_all(&((t.len() * 8) as u64).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| IhanError::Checkpoint(format!("truncated file while reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| IhanError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(IhanError::Checkpoint("not an ihan checkpoint (bad magic)".into()));
    }
    let header_len = read_u64(&mut r, "header length")? as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)
        .map_err(|_| IhanError::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| IhanError::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(IhanError::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n = read_u64(&mut r, &entry.name)? as usize;
        if n != entry.rows * entry.cols * 8 {
            return Err(IhanError::Checkpoint(format!(
                "section {} holds {n} bytes, expected {}",
                entry.name,
                entry.rows * entry.cols * 8
            )));
        }
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes)
            .map_err(|_| IhanError::Checkpoint(format!("truncated section {}", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(IhanError::Checkpoint("trailing bytes after last section".into()));
    }

    let params = IhanParams::bind(header.mode, header.active_types, header.vocabularies, store)?;
    if params.dims != header.dims {
        return Err(IhanError::Checkpoint(format!(
            "header dims {:?} disagree with tensors {:?}",
            header.dims, params.dims
        )));
    }
    Ok(Checkpoint {
        params,
        train_config: header.train_config,
        metrics: header.metrics,
        saved_at: header.saved_at,
    })
}

/// Byte range of the `saved_at` value inside a serialized checkpoint.
pub fn timestamp_span(bytes: &[u8]) -> Option<Range<usize>> {
    let header_end = 16 + u64::from_le_bytes(bytes.get(8..16)?.try_into().ok()?) as usize;
    let header = bytes.get(16..header_end)?;
    let key = SAVED_AT_KEY.as_bytes();
    let start = header.windows(key.len()).position(|w| w == key)? + 16 + key.len();
    let len = bytes[start..].iter().position(|&b| b == b'"')?;
    Some(start..start + len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Code, Encounter, PatientRecord};
    use crate::seed;

    fn cohort() -> Vec<PatientRecord> {
        let enc = |d: &str, codes: &[(CodeType, &str)]| Encounter {
            date: d.parse().unwrap(),
            codes: codes.iter().map(|(t, c)| Code::new(*t, *c)).collect(),
        };
        vec![
            PatientRecord {
                patient_id: "a".into(),
                label: 1,
                encounters: vec![
                    enc("2019-01-01", &[(CodeType::Diag, "D1"), (CodeType::Lab, "L1_H")]),
                    enc("2019-02-01", &[(CodeType::Diag, "D2")]),
                ],
            },
            PatientRecord {
                patient_id: "b".into(),
                label: 0,
                encounters: vec![enc("2019-03-01", &[(CodeType::Diag, "D1"), (CodeType::Rx, "R1")])],
            },
        ]
    }

    fn model(mode: Mode) -> IhanParams {
        let dims = ModelDims {
            embedding_dim: 5,
            hidden_dim: 4,
        };
        let types = [CodeType::Diag, CodeType::Lab, CodeType::Rx];
        IhanParams::from_training_data(mode, &types, &cohort(), 1, dims, &mut seed::stream(1, seed::INIT))
            .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for mode in [Mode::AlgorithmComb, Mode::DataComb] {
            let params = model(mode);
            let mut metrics = BTreeMap::new();
            metrics.insert("test_auc".to_string(), 0.75);
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &params, None, &metrics, "2024-05-06T07:08:09Z").unwrap();
            let ck = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(ck.params, params);
            assert_eq!(ck.metrics, metrics);
            for p in cohort() {
                assert_eq!(
                    ck.params.predict(&p).unwrap().to_bits(),
                    params.predict(&p).unwrap().to_bits()
                );
            }
            let span = timestamp_span(&bytes).unwrap();
            assert_eq!(&bytes[span], b"2024-05-06T07:08:09Z");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let params = model(Mode::AlgorithmComb);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &params, None, &BTreeMap::new(), "2024-05-06T07:08:09Z").unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(IhanError::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut versioned = bytes.clone();
        versioned[at + key.len() - 1] = b'7';
        let err = read_checkpoint(versioned.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn timestamp_must_be_fixed_width() {
        let params = model(Mode::DataComb);
        let err = write_checkpoint(Vec::new(), &params, None, &BTreeMap::new(), "yesterday").unwrap_err();
        assert!(matches!(err, IhanError::Checkpoint(_)));
    }
}
