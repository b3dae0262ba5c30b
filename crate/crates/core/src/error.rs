//! Crate error type.

use thiserror::Error;

/// Errors surfaced by corpus ingestion, embedding IO, training and decode.
///
/// Shape mismatches inside the tensor engine are programmer errors and
/// panic with a diagnostic instead of returning a variant here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate title {title:?} for language {language} (line {line})")]
    DuplicateTitle {
        title: String,
        language: String,
        line: usize,
    },

    #[error("no pages in corpus {path}")]
    EmptyCorpus { path: String },

    #[error("page {title:?}: empty paragraph")]
    EmptyParagraph { title: String },

    #[error("{path}:{line}: expected {expected} vector components, found {found}")]
    VectorLength {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("alignment underdetermined: {usable} usable pairs for dimension {dim}")]
    Underdetermined { usable: usize, dim: usize },

    #[error("alignment solve failed: {0}")]
    Singular(String),

    #[error("language {0} not aligned into English space")]
    NotAligned(String),

    #[error("non-finite value in node {node}")]
    NonFinite { node: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("bad file format for {path}: {msg}")]
    BadFormat { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Stable machine-parsable code, one per failure family.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::MalformedRecord { .. } => "E_PARSE",
            Error::DuplicateTitle { .. } => "E_DUP_TITLE",
            Error::EmptyCorpus { .. } => "E_EMPTY_CORPUS",
            Error::EmptyParagraph { .. } => "E_EMPTY_PARAGRAPH",
            Error::VectorLength { .. } => "E_VECTOR_LEN",
            Error::Underdetermined { .. } => "E_UNDERDETERMINED",
            Error::Singular(_) => "E_SINGULAR",
            Error::NotAligned(_) => "E_NOT_ALIGNED",
            Error::NonFinite { .. } => "E_NON_FINITE",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::BadFormat { .. } => "E_FORMAT",
            Error::Config(_) => "E_CONFIG",
            Error::Eval(_) => "E_EVAL",
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
