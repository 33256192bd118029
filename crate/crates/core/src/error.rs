use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Machine-readable validation failure codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IssueCode {
    BadMSize,
    NonpositiveVariance,
    ModeConflict,
    NotSpd,
    BadLength,
    BadIndex,
    NonFinite,
}

impl IssueCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueCode::BadMSize => "BAD_M_SIZE",
            IssueCode::NonpositiveVariance => "NONPOSITIVE_VARIANCE",
            IssueCode::ModeConflict => "MODE_CONFLICT",
            IssueCode::NotSpd => "NOT_SPD",
            IssueCode::BadLength => "BAD_LENGTH",
            IssueCode::BadIndex => "BAD_INDEX",
            IssueCode::NonFinite => "NON_FINITE",
        }
    }
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub code: IssueCode,
    pub message: String,
}

/// Every invariant a raw scenario violated, not just the first one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationError {
    pub issues: Vec<Issue>,
}

impl ValidationError {
    pub fn push(&mut self, code: IssueCode, message: impl Into<String>) {
        self.issues.push(Issue {
            code,
            message: message.into(),
        });
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .issues
            .iter()
            .map(|i| format!("{}: {}", i.code, i.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    Validation(#[from] ValidationError),

    #[error("rank update is singular (|1 + y'G^-1 x| = {denominator:e})")]
    SingularUpdate { denominator: f64 },

    #[error("block matrix is singular: {0}")]
    SingularBlock(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("grid search over {dims} free coordinates exceeds the budget of {limit}")]
    BudgetExceeded { dims: usize, limit: usize },

    #[error("closed form disagrees with the general solver by {discrepancy:e} ({context})")]
    Inconsistent { context: String, discrepancy: f64 },

    #[error("invalid portfolio: {0}")]
    InvalidPortfolio(String),

    #[error("metric is zero; scaling comparison is degenerate")]
    DegenerateMetric,

    #[error("operation not available in {0} mode")]
    UnsupportedMode(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short code used in `error[CODE]:` diagnostics.
    pub fn code(&self) -> String {
        match self {
            Error::Validation(v) => v
                .issues
                .first()
                .map(|i| i.code.as_str().to_string())
                .unwrap_or_else(|| "VALIDATION".into()),
            Error::SingularUpdate { .. } => "SINGULAR_UPDATE".into(),
            Error::SingularBlock(_) => "SINGULAR_BLOCK".into(),
            Error::NotSpd(_) => "NOT_SPD".into(),
            Error::NotSymmetric(_) => "NOT_SYMMETRIC".into(),
            Error::Dimension(_) => "DIMENSION".into(),
            Error::BudgetExceeded { .. } => "BUDGET_EXCEEDED".into(),
            Error::Inconsistent { .. } => "INCONSISTENT".into(),
            Error::InvalidPortfolio(_) => "INVALID_PORTFOLIO".into(),
            Error::DegenerateMetric => "DEGENERATE_METRIC".into(),
            Error::UnsupportedMode(_) => "UNSUPPORTED_MODE".into(),
            Error::InvalidArgument(_) => "INVALID_ARGUMENT".into(),
            Error::Parse(_) => "PARSE".into(),
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "IO_NOT_FOUND".into(),
            Error::Io(_) => "IO".into(),
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::InvalidPortfolio(_)
            | Error::InvalidArgument(_)
            | Error::UnsupportedMode(_)
            | Error::Parse(_)
            | Error::Dimension(_)
            | Error::NotSymmetric(_) => 1,
            Error::Io(_) => 3,
            _ => 2,
        }
    }
}
