use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ");
        Error::Shape { op, shapes }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.to_string(),
        }
    }
}
