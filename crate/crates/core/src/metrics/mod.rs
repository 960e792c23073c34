//! Evaluation: FID over a classifier's feature layer, the composed-set
//! classification harness, nearest-real and diversity audits.

mod audit;
mod classify;
mod fid;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::models::ModelError;

pub use audit::{
    diversity, embeddings_csv, export_embeddings, nearest_cosine, nearest_l1, nearest_real, DiversityReport,
    NearestMatch, NearestReal, DEFAULT_ALARM_FRACTION,
};
pub use classify::{
    augmented_classification, train_classifier, ClassificationReport, ClassifierConfig, Composition, TrainedClassifier,
};
pub use fid::{feature_stats, fid, matrix_sqrt, trace_sqrt_product, trace_sqrt_product_symmetric, FidStats};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}
