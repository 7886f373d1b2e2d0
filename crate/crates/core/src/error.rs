use std::path::PathBuf;

/// Errors produced anywhere in the distillation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("gradient requested for a value that is not recorded on this tape")]
    NotOnTape,

    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing input for `{key}`: {}", path.display())]
    MissingInput { key: String, path: PathBuf },

    #[error(
        "non-finite matching loss at outer step {step}, inner step {inner}, class {class} \
         (image lr {image_lr}, net lr {net_lr})"
    )]
    NonFinite {
        step: usize,
        inner: usize,
        class: usize,
        image_lr: f64,
        net_lr: f64,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for missing inputs or bad configuration,
    /// 3 for a non-finite loss, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::MissingInput { .. } => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
