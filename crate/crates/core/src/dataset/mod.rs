//! Dataset ingestion, stratified splitting, preprocessing and capture-quality
//! scoring.

mod manifest;
mod preprocess;
mod quality;
mod split;
pub mod synthetic;
mod taxonomy;

use thiserror::Error;

pub use manifest::{
    ingest_directory, DatasetManifest, ImageRecord, IngestOutcome, Split, SplitRatios,
    MANIFEST_HEADER,
};
pub use preprocess::{preprocess_image, preprocess_rgb, PreprocessSpec, IMAGENET_MEAN, IMAGENET_STD};
pub use quality::{laplacian_variance, luminance_iqr, quality_gate, QualityReport, QualityThresholds};
pub use split::{largest_remainder, stratified_split, MIN_CLASS_SIZE};
pub use taxonomy::ClassTaxonomy;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("empty dataset: no decodable images found")]
    EmptyDataset,
    #[error("unknown class {0:?}: not part of the taxonomy")]
    UnknownClass(String),
    #[error("K ≥ 2 required, found {0} class(es)")]
    TooFewClasses(usize),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("class too small to stratify: {class:?} has {count} record(s), need at least 3")]
    ClassTooSmall { class: String, count: usize },
    #[error("split ratios must be non-negative and sum to 1: {0}")]
    InvalidRatios(String),
    #[error("degenerate image: zero area")]
    DegenerateImage,
    #[error("invalid preprocessing spec: {0}")]
    InvalidPreprocess(String),
    #[error("manifest format: {0}")]
    ManifestFormat(String),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opens and decodes one image file.
pub fn load_image(path: &std::path::Path) -> Result<image::DynamicImage, DatasetError> {
    let decode_err = |message: String| DatasetError::Decode {
        path: path.display().to_string(),
        message,
    };
    image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| decode_err(e.to_string()))
}
