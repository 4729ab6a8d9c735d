//! Error types shared across the crate, grouped by the boundary they guard.
//!
//! Internal shape bookkeeping uses panics (a mis-shaped graph is a programming
//! error); everything reachable from user input — files, configs, CLI
//! arguments, numerical tolerances — returns one of these.

use thiserror::Error;

/// Failures of the dense numerical kernels (matrix functions, autodiff,
/// gradient checking).
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite entries in {context}")]
    NonFinite { context: String },
    #[error("matrix is singular to working precision (pivot {pivot:e})")]
    Singular { pivot: f64 },
    #[error("matrix not symmetric within 1e-9 (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("loss builder is not deterministic: two forward passes differ ({a} vs {b})")]
    NonDeterministicBuilder { a: f64, b: f64 },
    #[error("gradient check probed zero coordinates")]
    EmptyGradCheck,
}

/// Failures configuring or running the scene simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("timestamps must be strictly increasing (index {index})")]
    NonIncreasingTimestamps { index: usize },
    #[error("need at least 2 positions to derive actions, got {got}")]
    TooFewPositions { got: usize },
    #[error("position/timestamp count mismatch: {positions} positions vs {timestamps} timestamps")]
    LengthMismatch { positions: usize, timestamps: usize },
}

/// Failures reading or writing on-disk artifacts (datasets, checkpoints,
/// configs, CSV reports).
#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: String, got: String },
    #[error("unsupported format version {got} (supported: {supported})")]
    Version { got: u32, supported: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("implausible {field} = {value} while reading {context}")]
    Implausible { field: String, value: u64, context: String },
    #[error("refusing to write an empty dataset")]
    EmptyDataset,
    #[error("config error: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShape { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint contains unexpected tensor {name}")]
    UnexpectedTensor { name: String },
    #[error("non-finite values in {context}")]
    NonFinite { context: String },
}

/// Contract violations at the model/training boundary.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} rows/features, model expects {expected} ({context})")]
    DimMismatch { expected: usize, got: usize, context: String },
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("rollout horizon {horizon} exceeds available actions {available}")]
    HorizonOverrun { horizon: usize, available: usize },
    #[error("parameter sets differ: {reason}")]
    ParamSetMismatch { reason: String },
    #[error("variance/covariance terms need at least 2 segments per step, got {got}")]
    BatchTooSmall { got: usize },
    #[error("no trajectory is long enough for horizon {horizon} (need {need} snapshots)")]
    NoValidSegment { horizon: usize, need: usize },
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
}

/// Contract violations in the chart-quality metrics.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{metric}: need at least {need} points, got {got}")]
    TooFewPoints { metric: String, need: usize, got: usize },
    #[error("neighborhood size k={k} out of range [1, {max}] for n={n}")]
    BadNeighborhood { k: usize, max: usize, n: usize },
    #[error("point sets differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{metric}: {reason}")]
    Degenerate { metric: String, reason: String },
}
