use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("trace does not match gradient shape: trace {trace_rows}x{trace_cols}, grad {grad_rows}x{grad_cols}")]
    TraceMismatch {
        trace_rows: usize,
        trace_cols: usize,
        grad_rows: usize,
        grad_cols: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid posterior grid: {0}")]
    InvalidGrid(String),
    #[error("target of length {target_len} needs at least {min_frames} frames, got {frames}")]
    Infeasible {
        target_len: usize,
        min_frames: usize,
        frames: usize,
    },
    #[error("target contains symbol index {0} which is blank or out of range")]
    InvalidTarget(usize),
    #[error("reference set has zero total length")]
    EmptyReferenceSet,
    #[error("spike set is empty")]
    EmptySpikeSet,
    #[error("invalid spike set: {0}")]
    InvalidSpikes(String),
    #[error("bad fusion weights: {0}")]
    BadWeights(String),
    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),
    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid synthetic task spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training configuration: {0}")]
    InvalidJob(String),
    #[error("non-finite gradient in batch {batch}")]
    NonFiniteGradient { batch: usize },
    #[error("non-finite loss on utterance {utterance}")]
    NonFiniteLoss { utterance: String },
    #[error("no cached entry for utterance {0}")]
    MissingCacheEntry(String),
    #[error("no utterance with id {0:?}")]
    UnknownUtterance(String),
    #[error("parse error at line {line}, offset {offset}: {msg}")]
    Parse {
        line: usize,
        offset: usize,
        msg: String,
    },
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
