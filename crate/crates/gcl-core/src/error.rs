use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown expert {id} (have {count})")]
    UnknownExpert { id: usize, count: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("label {0} is masked out")]
    MaskedLabel(usize),
    #[error("router has not been solved; call solve() first")]
    Unsolved,
    #[error("k-means router has not been finalized")]
    Unfinalized,
    #[error("cannot shrink from {current} to {requested} experts")]
    Shrink { current: usize, requested: usize },
    #[error("factorization failed (last jitter {jitter:e})")]
    Factorization { jitter: f64 },
    #[error("expert {0} is frozen")]
    Frozen(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("undefined: {0}")]
    Undefined(&'static str),
}

impl Error {
    /// True for failures caused by floating-point trouble rather than misuse.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Factorization { .. })
    }
}
