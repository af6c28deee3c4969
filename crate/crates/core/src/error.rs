use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("bad magic: expected \"SQZM\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unexpected file kind {found:?}, expected {expected:?}")]
    WrongKind { found: String, expected: &'static str },

    #[error("section {section} truncated: expected {expected} bytes, only {actual} available")]
    Truncated { section: String, expected: usize, actual: usize },

    #[error("malformed section {section}: {message}")]
    Malformed { section: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension { context, expected, actual }
    }

    /// True for errors caused by unreadable or malformed files rather than bad values.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::WrongKind { .. }
                | Error::Truncated { .. }
                | Error::Malformed { .. }
        )
    }
}
