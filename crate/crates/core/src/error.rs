use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {got} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h})")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("cannot downsample {from:?} to larger grid {to:?}")]
    Upsample { from: (usize, usize), to: (usize, usize) },

    #[error("image {height}x{width} is not divisible by stride {stride}")]
    IndivisibleImage { height: usize, width: usize, stride: usize },

    #[error("{what}: width {width} is not divisible by {by}")]
    Indivisible { what: &'static str, width: usize, by: usize },

    #[error("assignment needs at least as many predictions as targets ({targets} > {predictions})")]
    TooManyTargets { targets: usize, predictions: usize },

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("K must be positive")]
    InvalidK,

    #[error("class-count mismatch: head has {head} classes, table has {table}")]
    ClassCountMismatch { head: usize, table: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {record} (line {line}): {message}")]
    Invariant { record: usize, line: usize, message: String },

    #[error("could not place objects after {retries} retries (scene {index})")]
    Placement { index: u64, retries: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("config digest mismatch: checkpoint {checkpoint}, config {config}")]
    DigestMismatch { checkpoint: String, config: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
