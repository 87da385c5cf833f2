use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ill-conditioned inversion: {count} pixel(s) have transmission below {t_min}")]
    IllConditioned { count: usize, t_min: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("dangling reference(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    DanglingReference(Vec<PathBuf>),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from non-finite arithmetic rather than bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::IllConditioned { .. })
    }
}
