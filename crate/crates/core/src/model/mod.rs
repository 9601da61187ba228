//! Transfer-learning classifier: a convolutional backbone, a dense head, the
//! Adam optimizer and the on-disk checkpoint format.

mod artifact;
mod backbone;
mod classifier;
mod conv;
mod head;
mod optim;

pub use artifact::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use backbone::{registry_entry, Backbone, BackboneFamily, BackboneSpec, RegistryEntry, WeightSource, REGISTRY};
pub use classifier::{softmax, ClassifierModel, Gradients, TrainableStage};
pub use conv::{ConvGrads, ConvLayer};
pub use head::{BatchNorm, Dense, DenseGrads, Head, HeadCache, HeadConfig, HeadGrads, BATCH_NORM_EPSILON, BATCH_NORM_MOMENTUM};
pub use optim::{Adam, AdamConfig};


use thiserror::Error;

use crate::dataset::DatasetError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),
    #[error("pretrained weights for {0:?} are not bundled; only \"tiny-cnn\" can be built in-process")]
    WeightsUnavailable(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("layer not found: {0:?}")]
    LayerNotFound(String),
    #[error("layer {0:?} has no spatial extent")]
    NonSpatialLayer(String),
    #[error("input shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("head has {head} outputs but the taxonomy has {taxonomy} classes")]
    ClassCountMismatch { head: usize, taxonomy: usize },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("cannot unfreeze {requested} layers, backbone has {available}")]
    TooManyLayers { requested: usize, available: usize },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
