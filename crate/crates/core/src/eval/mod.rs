//! Embedding-quality evaluation: stratified splits, kNN classification and
//! 2-D PCA projection.

mod knn;
mod projection;
mod split;

pub use knn::{knn_classify, EvalReport};
pub use projection::{pca_top2, project_2d, write_projection_csv, Pca, ProjectedPoint, Projection};
pub use split::{stratified_split, SplitPlan};

use crate::index::IndexError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("record {0:?} has no label")]
    UnlabeledRecord(String),
    #[error("class {0:?} has fewer than 2 records")]
    ClassTooSmall(String),
    #[error("split references unknown record {0:?}")]
    UnknownRecord(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least 3 records, have {0}")]
    TooFewRecords(usize),
    #[error("data has zero variance")]
    DegenerateData,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
