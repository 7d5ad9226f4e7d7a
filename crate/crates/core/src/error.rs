use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(PathBuf),

    #[error("incompatible file or model: {0}")]
    Incompatible(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("query {qid}: {source}")]
    Query {
        qid: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Attaches the id of the query being processed.
    pub fn in_query(self, qid: u64) -> Self {
        match self {
            e @ Error::Query { .. } => e,
            e => Error::Query {
                qid,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through query context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Query { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
