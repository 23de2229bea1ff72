use alloc::string::String;

/// Failure categories shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Data violates a structural invariant (duplicates, dangling references, leakage).
    #[error("integrity violation: {0}")]
    Integrity(String),
    /// A record could not be decoded.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// Rendered text does not follow the prompt grammar.
    #[error("grammar error at char {position}: {message}")]
    Grammar { position: usize, message: String },
    /// An operation was invoked in the wrong lifecycle state.
    #[error("invalid state: {0}")]
    State(String),
    /// A non-finite value reached the optimizer or a loss.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A metric has no defined value for the given input (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    Undefined(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
