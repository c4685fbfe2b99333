//! Interpretable hierarchical attention network (IHAN) for risk prediction over
//! dated, multi-type medical code histories.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`tape`]), the GRU cell, AdamW, the three-level attention model
//! ([`model`]), exact per-code contribution decomposition ([`interpret`]),
//! cohort handling and a synthetic cohort generator ([`data`], [`synth`]),
//! and the training/evaluation protocol ([`train`], [`metrics`], [`baseline`],
//! [`experiment`]). The `ihan` binary wires these together; see [`cli`].

pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod gru;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{IhanError, Result};
pub use model::{AttentionTrace, IhanParams, Mode, ModelDims};
pub use tensor::Tensor;
pub use vocab::CodeType;
