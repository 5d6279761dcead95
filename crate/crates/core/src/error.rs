use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("non-positive box height for sample `{0}`")]
    NonPositiveBoxHeight(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed file {}: {reason}", path.display())]
    MalformedFile { path: PathBuf, reason: String },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("{samples} samples cannot fill {views} views")]
    TooFewSamples { samples: usize, views: usize },
    #[error("invalid view count {0} (need at least 2)")]
    InvalidViewCount(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown view {view} (model has {views} views)")]
    UnknownView { view: usize, views: usize },
    #[error("no view has a feature to average")]
    AllViewsMissing,
    #[error("index {index} out of range for {len} views")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite `{term}` loss at epoch {epoch} step {step}")]
    DivergenceDetected { term: &'static str, epoch: usize, step: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("no detection record or ratio for sample `{0}`")]
    MissingDetection(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Variant name, printed by the CLI on failure.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::MalformedLine { .. } => "MalformedLine",
            Error::NonPositiveBoxHeight(_) => "NonPositiveBoxHeight",
            Error::DuplicateSampleId(_) => "DuplicateSampleId",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::IoFailure(_) => "IoFailure",
            Error::MalformedFile { .. } => "MalformedFile",
            Error::UnknownSplit(_) => "UnknownSplit",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::InvalidViewCount(_) => "InvalidViewCount",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UnknownView { .. } => "UnknownView",
            Error::AllViewsMissing => "AllViewsMissing",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::CheckpointVersionMismatch { .. } => "CheckpointVersionMismatch",
            Error::MissingDetection(_) => "MissingDetection",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}
