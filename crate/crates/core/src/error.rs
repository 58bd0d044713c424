use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure surfaced by the library. Each variant maps onto a stable
/// machine-readable code and a process exit code (see [`Error::code`] and
/// [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("input has no rows or no columns")]
    EmptyData,
    #[error("column `{column}` has {found} rows, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
    #[error("outcome value at row {row} is not finite")]
    NonFiniteOutcome { row: usize },
    #[error("value `{value}` is not a declared level of factor `{factor}`")]
    UnknownLevel { value: String, factor: String },
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("column `{column}` row {row}: `{value}` is not a finite number")]
    InvalidNumber {
        column: String,
        row: usize,
        value: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid estimand: {0}")]
    InvalidEstimand(String),
    #[error("missing value for subset {0} in decomposition check")]
    MissingSubset(String),
    #[error("{n} observations cannot be split into {folds} folds of at least two rows")]
    TooFewObservations { n: usize, folds: usize },
    #[error("learner `{learner}` cannot be used here: {reason}")]
    LearnerMismatch { learner: String, reason: String },
    #[error("estimated outcome variance {value:e} is degenerate")]
    DegenerateVariance { value: f64 },
    #[error("singular design matrix in least-squares fit")]
    SingularDesign,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("report has no standard error (plug-in estimates carry none)")]
    MissingStdError,
    #[error("unsupported functional form: {0}")]
    UnsupportedForm(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("study cell `{cell}` failed: {reason}")]
    StudyCell { cell: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyData => "empty_data",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFiniteOutcome { .. } => "non_finite_outcome",
            Error::UnknownLevel { .. } => "unknown_level",
            Error::MissingValue { .. } => "missing_value",
            Error::InvalidNumber { .. } => "invalid_number",
            Error::Schema(_) => "schema",
            Error::InvalidEstimand(_) => "invalid_estimand",
            Error::MissingSubset(_) => "missing_subset",
            Error::TooFewObservations { .. } => "too_few_observations",
            Error::LearnerMismatch { .. } => "learner_mismatch",
            Error::DegenerateVariance { .. } => "degenerate_variance",
            Error::SingularDesign => "singular_design",
            Error::Numerical(_) => "numerical",
            Error::MissingStdError => "missing_std_error",
            Error::UnsupportedForm(_) => "unsupported_form",
            Error::InvalidConfig(_) => "invalid_config",
            Error::StudyCell { .. } => "study_cell",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }

    /// Exit-code table: 2 input/schema, 3 degenerate variance, 4 numerical
    /// failure, 5 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptyData
            | Error::LengthMismatch { .. }
            | Error::NonFiniteOutcome { .. }
            | Error::UnknownLevel { .. }
            | Error::MissingValue { .. }
            | Error::InvalidNumber { .. }
            | Error::Schema(_)
            | Error::TooFewObservations { .. }
            | Error::Io(_)
            | Error::Csv(_) => 2,
            Error::DegenerateVariance { .. } => 3,
            Error::SingularDesign | Error::Numerical(_) => 4,
            Error::StudyCell { reason, .. } if reason.contains("degenerate") => 3,
            Error::InvalidEstimand(_)
            | Error::MissingSubset(_)
            | Error::LearnerMismatch { .. }
            | Error::MissingStdError
            | Error::UnsupportedForm(_)
            | Error::InvalidConfig(_)
            | Error::StudyCell { .. } => 5,
        }
    }
}
