//! Post-hoc explanations: LIME over SLIC superpixels, Grad-CAM heatmaps, and
//! overlay rendering.

mod gradcam;
mod lime;
mod render;
mod slic;

use thiserror::Error;

use crate::model::ModelError;

pub use gradcam::{gradcam_explain, gradcam_from_activations, upsample_bilinear, GradCamHeatmap};
pub use lime::{lime_explain, lime_fit, weighted_ridge, Baseline, LimeConfig, LimeExplanation, LimeSample, ProbabilityModel, RidgeFit};
pub use render::{
    colormap, composite, composite_gradcam, composite_lime, heatmap_panel, lime_weight_panel, render_gradcam,
    render_lime, write_explanation, ExplanationSidecar, LimeSummary, GRADCAM_ALPHA, GUTTER, LIME_ALPHA,
};
pub use slic::{rgb_to_lab, segment_superpixels, SuperpixelMap, SuperpixelParams};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid explanation config: {0}")]
    InvalidConfig(String),
    #[error("image {width}×{height} is too small to yield {min_segments} superpixels")]
    ImageTooSmall { width: u32, height: u32, min_segments: usize },
    #[error("no segments to perturb")]
    NoSegments,
    #[error("target class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("model query failed: {0}")]
    ModelQuery(String),
    #[error("zero-size activation at layer {0:?}")]
    EmptyActivation(String),
    #[error("dimension mismatch: explanation is {expected:?}, image is {found:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
