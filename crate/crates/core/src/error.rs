use std::fmt;

use crate::refiner::RefinerParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a knowledge-graph entry failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    InvertedInterval,
    OutOfRange,
    NonFinite,
    BadArity,
    EmptyCategory,
    DuplicateCategory,
    WrongType,
    CategoryMismatch,
}

impl fmt::Display for ValidationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValidationKind::InvertedInterval => "inverted interval",
            ValidationKind::OutOfRange => "value out of range",
            ValidationKind::NonFinite => "non-finite value",
            ValidationKind::BadArity => "range must be a 2-element array",
            ValidationKind::EmptyCategory => "empty category",
            ValidationKind::DuplicateCategory => "duplicate category",
            ValidationKind::WrongType => "wrong value type",
            ValidationKind::CategoryMismatch => "category does not match the requested term",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("missing field \"{field}\" in entry {category:?}")]
    Schema { category: String, field: String },

    #[error("{kind} in field \"{field}\" of entry {category:?}")]
    Validation {
        category: String,
        field: String,
        kind: ValidationKind,
    },

    #[error("unknown class id {class_id} (graph has {num_classes} classes)")]
    Lookup { class_id: u32, num_classes: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("synthesis error: label {class_id} does not resolve in the knowledge graph")]
    Synthesis { class_id: u32 },

    #[error("grid format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("extraction failed for {term:?} after {attempts} attempt(s): {reason}")]
    Extraction {
        term: String,
        attempts: u32,
        reason: String,
        raw: String,
    },

    #[error("no vocabulary term could be extracted ({failures} failure(s))")]
    EmptyGraph { failures: usize },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_finite: Box<RefinerParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(category: &str, field: &str, kind: ValidationKind) -> Self {
        Error::Validation {
            category: category.to_owned(),
            field: field.to_owned(),
            kind,
        }
    }

    /// Stable short name of the error class, used in machine-readable reports.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Validation { .. } => "validation",
            Error::Lookup { .. } => "lookup",
            Error::Input(_) => "input",
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Synthesis { .. } => "synthesis",
            Error::Format { .. } => "format",
            Error::Transport(_) => "transport",
            Error::Extraction { .. } => "extraction",
            Error::EmptyGraph { .. } => "empty_graph",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
