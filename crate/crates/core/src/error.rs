use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no valid classes in label map")]
    NoValidClasses,

    #[error("label map contains only IGNORE pixels")]
    AllIgnored,

    #[error("label value {value} out of range for {num_classes} classes")]
    LabelRange { value: u8, num_classes: usize },

    #[error("non-finite loss component {component} = {value}")]
    NonFinite { component: &'static str, value: f64 },

    #[error("step {step}: non-finite loss ({breakdown})")]
    Diverged { step: u64, breakdown: String },

    #[error("parameter mismatch: {0}")]
    Param(String),

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
