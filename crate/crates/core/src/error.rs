use std::path::PathBuf;

use crate::{ClassId, SampleId};

pub type Result<T> = std::result::Result<T, CbsError>;

#[derive(Debug, thiserror::Error)]
pub enum CbsError {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("dimension mismatch: expected {expected}, found {found}{}", row_suffix(*.row))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        row: Option<usize>,
    },
    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },
    #[error("sample {0} is a zero vector and cannot be normalized")]
    ZeroVector(SampleId),
    #[error("unknown sample id {0}")]
    UnknownId(SampleId),
    #[error("duplicate sample id {0}")]
    DuplicateId(SampleId),
    #[error("sample ids must be dense in [0, {n}); missing {missing}")]
    SparseIds { n: usize, missing: SampleId },
    #[error("cannot estimate a distribution from an empty set")]
    EmptyInput,
    #[error("accumulator is empty")]
    EmptyAccumulator,
    #[error("k = {k} exceeds the number of points {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("features must be L2-normalized before clustering")]
    NotNormalized,
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("budget {budget} exceeds pool size {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("C({n}, {k}) = {count} subsets exceeds the guard of {guard}")]
    CombinatorialGuard {
        n: usize,
        k: usize,
        count: u128,
        guard: u64,
    },
    #[error("classifier needs at least 2 classes, has {0}")]
    DegenerateClassifier(usize),
    #[error("classifier has no classes")]
    NoClasses,
    #[error("allowed class set is empty")]
    EmptyAllowedSet,
    #[error("class {0} has no samples to estimate a distribution from")]
    EmptyClass(ClassId),
    #[error("label {label} of sample {id} is outside the session class space")]
    LabelOutsideSessionSpace { id: SampleId, label: ClassId },
    #[error("class {0} was already learned in an earlier session")]
    ClassAlreadySeen(ClassId),
    #[error("sample {0} has no oracle label")]
    MissingLabel(SampleId),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("invalid session plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place {classes} class centers at the requested separation after {attempts} attempts")]
    InfeasibleSeparation { classes: usize, attempts: usize },
    #[error("session {session} failed: {source}")]
    Session {
        session: usize,
        #[source]
        source: Box<CbsError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn row_suffix(row: Option<usize>) -> String {
    row.map(|r| format!(" at row {r}")).unwrap_or_default()
}

impl CbsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CbsError::Io {
            path: path.into(),
            source,
        }
    }
}
