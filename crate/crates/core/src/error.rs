use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate input: vector norm below 1e-12 ({0})")]
    DegenerateNorm(&'static str),
    #[error("class {0} is not registered")]
    UnknownClass(usize),
    #[error("class name {name:?} already registered by dataset {dataset}")]
    DuplicateClassName { name: String, dataset: usize },
    #[error("feature file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("corrupt feature header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("feature dimension mismatch in {path}: expected {expected}, found {found}")]
    DimMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("metric {0} is undefined for a sequence of one dataset")]
    UndefinedMetric(&'static str),
    #[error("joint accuracy for dataset {0} is zero; upper-bound ratio undefined")]
    ZeroJointAccuracy(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("dataset {0} has no training bags")]
    EmptyTrainingSet(usize),
    #[error("class {class} has {count} bags, fewer than {folds} folds")]
    TooFewBags { class: usize, count: usize, folds: usize },
    #[error("infeasible generator constraints: {0}")]
    Infeasible(String),
    #[error("penalty table for dataset {0} has not been finalized")]
    MissingPenaltyTable(usize),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("data file parse error at line {line}: {reason}")]
    DataFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
