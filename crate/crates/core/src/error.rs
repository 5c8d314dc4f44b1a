use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failures while parsing IDX containers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value {value} in {context}")]
    NonFinite { value: f64, context: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("accuracy matrix entry ({row}, {col}) is missing")]
    IncompleteMatrix { row: usize, col: usize },
    #[error("empty test set for task {0}")]
    EmptyTestSet(usize),
    #[error("inner step {step}: {source}")]
    InnerStep { step: usize, source: Box<Error> },
    #[error("task {task}, batch {batch}: {source}")]
    Training { task: usize, batch: usize, source: Box<Error> },
    #[error(transparent)]
    Idx(#[from] IdxError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::InnerStep { step, source: Box::new(self) }
    }

    pub(crate) fn at_batch(self, task: usize, batch: usize) -> Self {
        Error::Training { task, batch, source: Box::new(self) }
    }
}

/// Returns `value` when finite, otherwise a [`Error::NonFinite`] tagged with `context`.
pub(crate) fn check_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { value, context })
    }
}
