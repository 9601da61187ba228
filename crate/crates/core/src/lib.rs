//! Skin-lesion classification toolkit: dataset manifests, a transfer-learning
//! classifier built from a frozen backbone and a small dense head, training
//! with plateau callbacks, multiclass evaluation, and LIME / Grad-CAM
//! explanations.

pub mod dataset;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;
