use std::path::PathBuf;

/// Errors surfaced by the compositing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("resolution {0}x{1} has a zero dimension")]
    ZeroResolution(usize, usize),

    #[error("target {target:?} does not divide source {source_dims:?}")]
    NonDivisible {
        source_dims: (usize, usize),
        target: (usize, usize),
    },

    #[error("caption span for object {object} ({start}..{end}) maps to no tokens")]
    EmptySpan {
        object: usize,
        start: usize,
        end: usize,
    },

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("image encoder failed on object {object}: {reason}")]
    Encoder { object: usize, reason: String },

    #[error("object {0} has zero attention mass over its slots")]
    ZeroAttentionMass(usize),

    #[error("timestep {t} out of range for a schedule of {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("{port} port failed: {reason}")]
    Port { port: &'static str, reason: String },

    #[error("sampler step {step}: {source}")]
    SamplerStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidLayout(_) => "invalid_layout",
            Error::ZeroResolution(..) => "zero_resolution",
            Error::NonDivisible { .. } => "non_divisible",
            Error::EmptySpan { .. } => "empty_span",
            Error::InvalidCaption(_) => "invalid_caption",
            Error::Encoder { .. } => "encoder",
            Error::ZeroAttentionMass(_) => "zero_attention_mass",
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::EmptyDataset => "empty_dataset",
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Image { .. } => "image",
            Error::Checkpoint { .. } => "checkpoint",
            Error::DegenerateCrop(_) => "degenerate_crop",
            Error::Port { .. } => "port",
            Error::SamplerStep { .. } => "sampler_step",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
