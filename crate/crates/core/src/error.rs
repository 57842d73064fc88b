//! Crate-wide error type.

use std::path::PathBuf;

use autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image {height}x{width} is too small for {levels} feature levels (minimum {min}x{min})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        levels: usize,
        min: usize,
    },

    #[error("sequence state at layer {layer} has no domain query slot")]
    MissingDomainQuery { layer: usize },

    #[error("per-layer loss lists differ in length: {left} vs {right}")]
    LayerCountMismatch { left: usize, right: usize },

    #[error("box has non-positive extent: w={w}, h={h}")]
    DegenerateBox { w: f64, h: f64 },

    #[error("assignment requires rows >= columns, got {rows}x{cols}")]
    AssignmentShape { rows: usize, cols: usize },

    #[error("{count} ground-truth objects exceed the {queries} object queries")]
    TooManyObjects { count: usize, queries: usize },

    #[error("prediction sets have different sizes: {left} vs {right}")]
    SetSizeMismatch { left: usize, right: usize },

    #[error("ensemble reference requires at least one decoder layer")]
    EmptyEnsemble,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("loss component {component} is not finite at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed ppm file {path} at byte {offset}: {detail}")]
    PpmParse {
        path: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("malformed json file {path} at byte {offset} (line {line}, column {column}): {detail}")]
    JsonParse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("annotation references missing image file {path}")]
    MissingImage { path: PathBuf },

    #[error("malformed checkpoint {path}: {detail}")]
    CheckpointFormat { path: PathBuf, detail: String },

    #[error("checkpoint is missing entry {name}")]
    CheckpointMissingEntry { name: String },

    #[error("checkpoint was trained with {checkpoint_classes} classes but the dataset uses class ids up to {dataset_max_class}")]
    ClassCountMismatch {
        checkpoint_classes: usize,
        dataset_max_class: usize,
    },

    #[error("domain divergence estimate needs at least {needed} samples per domain, got {source_count} source and {target_count} target")]
    TooFewSamples {
        needed: usize,
        source_count: usize,
        target_count: usize,
    },

    #[error("domain class balance {source_count}:{target_count} is outside the 60/40 tolerance")]
    ClassImbalance {
        source_count: usize,
        target_count: usize,
    },

    #[error("covering bound inputs must be positive, got {field} = {value}")]
    NonPositiveBoundInput { field: &'static str, value: f64 },

    #[error("covering bound input lengths differ: {norms} norms, {distances} distances, {lipschitz} lipschitz constants")]
    BoundLengthMismatch {
        norms: usize,
        distances: usize,
        lipschitz: usize,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
