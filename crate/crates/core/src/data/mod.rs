//! Labeled image sets, directory ingestion, the procedural texture corpus
//! and geometric augmentation.

mod augment;
mod corpus;
mod io;
mod set;

pub use augment::{
    apply_params, augment, sample_params, AugmentParams, AugmentPolicy, Normalization, MAX_ROTATION_DEG,
};
pub use corpus::{make_texture_corpus, CLASS_NAMES};
pub use io::{load_directory, save_directory, save_grid, to_image, LoadReport};
pub use set::LabeledImageSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
