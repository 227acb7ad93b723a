use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context} at line {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("invariant violated by record `{record}` (line {line}): {reason}")]
    Invariant {
        record: String,
        line: usize,
        reason: String,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("non-finite value in embedding {0}")]
    NonFinite(String),

    #[error("missing embedding for {0}")]
    MissingEmbedding(String),

    #[error("trajectory {0} has no scale-0 image")]
    MissingAnchor(String),

    #[error("no annotator choices for image {0}")]
    EmptyChoices(String),

    #[error("calibration set contains no out-of-class images")]
    NoOocSamples,

    #[error("target TPR {0} cannot be reached")]
    UnreachableTarget(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing score for image {0}")]
    MissingScore(String),

    #[error("missing verdict for image {0}")]
    MissingVerdict(String),

    #[error("empty denominator: {0}")]
    EmptyDenominator(&'static str),

    #[error("missing base prediction for trajectory {0}")]
    MissingBasePrediction(String),

    #[error("missing prediction of model `{model}` for image `{image}`")]
    MissingPrediction { model: String, image: String },

    #[error("missing scale-0 accuracy for model `{model}` on shift `{shift}`")]
    MissingBaseline { model: String, shift: String },

    #[error("accuracy tables do not line up: {0}")]
    TableMismatch(String),

    #[error("no consecutive scale pairs to compare")]
    NoPairs,

    #[error("invalid counts k={k}, n={n}")]
    InvalidCounts { k: u64, n: u64 },

    #[error("regressor is constant")]
    ConstantRegressor,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("control variable is perfectly correlated with an input")]
    DegenerateControl,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error(
        "no convergence after {iterations} iterations (loss {loss:e}, gradient norm {grad_norm:e})"
    )]
    NonConvergence {
        iterations: usize,
        loss: f64,
        grad_norm: f64,
    },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("missing required input {0}")]
    MissingInput(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            line,
            message: message.to_string(),
        }
    }

    /// Machine-readable code printed by the CLI as `code=<CODE>`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IO",
            Error::Parse { .. } => "PARSE",
            Error::Invariant { .. } => "INVARIANT",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::ZeroVector => "ZERO_VECTOR",
            Error::NonFinite(_) => "NON_FINITE",
            Error::MissingEmbedding(_) => "MISSING_EMBEDDING",
            Error::MissingAnchor(_) => "MISSING_ANCHOR",
            Error::EmptyChoices(_) => "EMPTY_CHOICES",
            Error::NoOocSamples => "NO_OOC_SAMPLES",
            Error::UnreachableTarget(_) => "UNREACHABLE_TARGET",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::MissingScore(_) => "MISSING_SCORE",
            Error::MissingVerdict(_) => "MISSING_VERDICT",
            Error::EmptyDenominator(_) => "EMPTY_DENOMINATOR",
            Error::MissingBasePrediction(_) => "MISSING_BASE_PREDICTION",
            Error::MissingPrediction { .. } => "MISSING_PREDICTION",
            Error::MissingBaseline { .. } => "MISSING_BASELINE",
            Error::TableMismatch(_) => "TABLE_MISMATCH",
            Error::NoPairs => "NO_PAIRS",
            Error::InvalidCounts { .. } => "INVALID_COUNTS",
            Error::ConstantRegressor => "CONSTANT_REGRESSOR",
            Error::LengthMismatch(..) => "LENGTH_MISMATCH",
            Error::DegenerateControl => "DEGENERATE_CONTROL",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::EmptyBatch => "EMPTY_BATCH",
            Error::OutOfRange(_) => "OUT_OF_RANGE",
            Error::NonConvergence { .. } => "NON_CONVERGENCE",
            Error::EmptySelection(_) => "EMPTY_SELECTION",
            Error::MissingInput(_) => "MISSING_INPUT",
        }
    }

    /// Process exit status: 2 for I/O, parse and missing-input problems, 1 for
    /// everything that is a validation failure of otherwise readable input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::MissingInput(_) => 2,
            _ => 1,
        }
    }
}
