use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or parameter does not have the shape an operation needs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown variant `{name}` (valid variants: {valid})")]
    UnknownVariant { name: String, valid: String },

    #[error("unknown ablation mode `{name}` (valid modes: {valid})")]
    UnknownAblation { name: String, valid: String },

    #[error("parameter store: {0}")]
    Store(String),

    #[error("parameter store is already fused")]
    AlreadyFused,

    #[error("weight file: bad magic {found:?}, expected \"PATW\"")]
    BadMagic { found: Vec<u8> },

    #[error("weight file: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("weight file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file: malformed record: {0}")]
    Malformed(String),

    #[error("weight file: tensor names do not match {expected}: {detail}")]
    NameSetMismatch { expected: String, detail: String },

    #[error("image: {0}")]
    Image(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
