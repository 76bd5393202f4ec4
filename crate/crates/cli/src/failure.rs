use std::fmt;

/// Error category of a failed command. Each maps to its own exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Missing,
    Dimension,
    Parse,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Missing => 3,
            Kind::Dimension => 4,
            Kind::Parse => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Other => "other",
            Kind::Config => "config",
            Kind::Missing => "missing_file",
            Kind::Dimension => "dimension",
            Kind::Parse => "parse",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl fmt::Display) -> Self {
        Failure {
            kind,
            message: message.to_string(),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Kind::Config, message)
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "code": self.kind.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl From<ui2vec::Error> for Failure {
    fn from(e: ui2vec::Error) -> Self {
        use ui2vec::Error as E;
        let kind = match &e {
            E::Shape { .. } | E::Dimension(_) => Kind::Dimension,
            E::Parse { .. } | E::Version { .. } => Kind::Parse,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Kind::Missing,
            E::Io { .. } | E::Invalid(_) => Kind::Other,
        };
        Failure::new(kind, e)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
