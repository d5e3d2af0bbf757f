//! Crate-wide error type.
//!
//! Variants map onto the machine-parsable failure categories printed by the
//! CLI (`error: <category>: <message>`), so library call sites should pick
//! the variant by what went wrong, not by where it happened.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions that cannot be combined.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter value outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged (non-finite loss or gradient) and was aborted.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Underlying I/O failure (file missing, permission, short read).
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Structurally invalid container or checkpoint (bad magic, wrong
    /// version, inconsistent header). Distinct from `Io`: the bytes were
    /// readable but do not form a valid artifact.
    #[error("format: {0}")]
    Format(String),

    /// Invalid or inconsistent run configuration.
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable category token used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Divergence(_) => "divergence",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_are_stable_tokens() {
        let cases: Vec<(Error, &str)> = vec![
            (Error::Shape("x".into()), "shape"),
            (Error::InvalidArgument("x".into()), "invalid-argument"),
            (Error::NonFinite("x".into()), "non-finite"),
            (Error::Divergence("x".into()), "divergence"),
            (Error::Format("x".into()), "format"),
            (Error::Config("x".into()), "config"),
        ];
        for (e, want) in cases {
            assert_eq!(e.category(), want);
        }
    }
}
