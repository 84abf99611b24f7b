use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A configuration violated one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An evaluation point fell outside the supported domain.
    #[error("domain error: {what} = {value} outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Malformed caller-supplied data (unsorted abscissae, orphan ids, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical evaluation produced a non-finite or overflowing value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A matrix required to be symmetric positive definite was not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Sampler initialization could not find a finite-posterior start.
    #[error("initialization failed: {0}")]
    Init(String),

    /// A simulation study failed at the study level.
    #[error("study failed: {0}")]
    Study(String),

    /// Too many subjects failed event-time inversion, so the whole
    /// simulated dataset is discarded.
    #[error(
        "dataset rejected: {failed_subjects} of {total} subjects failed event-time inversion"
    )]
    DatasetRejected { failed_subjects: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// JSON config rejected; the message carries the path of the offending key.
    #[error("config parse error at `{pointer}`: {message}")]
    ConfigParse { pointer: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
