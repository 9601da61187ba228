use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::ConvLayer;
use super::ModelError;
use crate::tensor::FeatureMap;

/// Seed for the bundled backbone's deterministic reference weights.
const TINY_CNN_WEIGHT_SEED: u64 = 0x7144_C0DE_2024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_size: u32,
    pub feature_layer: String,
    #[serde(default = "default_true")]
    pub pretrained: bool,
}

fn default_true() -> bool {
    true
}

impl BackboneSpec {
    /// Registry defaults for `name`.
    pub fn named(name: &str) -> Result<Self, ModelError> {
        let entry = registry_entry(name)?;
        Ok(Self {
            name: entry.name.to_string(),
            input_size: entry.input_sizes[0],
            feature_layer: entry.feature_layer.to_string(),
            pretrained: true,
        })
    }

    pub fn with_input_size(mut self, size: u32) -> Self {
        self.input_size = size;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneFamily {
    Cnn,
    Transformer,
}

/// Where an entry's pretrained weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Generated in-process from a fixed seed and hand-designed first-layer
    /// filters; always available.
    Bundled,
    /// Published ImageNet weights that must be supplied from outside this
    /// crate; such entries are listed for reference and cannot be built here.
    External,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub family: BackboneFamily,
    pub input_sizes: &'static [u32],
    pub feature_layer: &'static str,
    pub weights: WeightSource,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "tiny-cnn",
        family: BackboneFamily::Cnn,
        input_sizes: &[224, 299],
        feature_layer: "conv5",
        weights: WeightSource::Bundled,
    },
    RegistryEntry { name: "vgg16", family: BackboneFamily::Cnn, input_sizes: &[224], feature_layer: "block5_conv3", weights: WeightSource::External },
    RegistryEntry { name: "resnet50", family: BackboneFamily::Cnn, input_sizes: &[224], feature_layer: "conv5_block3_out", weights: WeightSource::External },
    RegistryEntry { name: "inception_v3", family: BackboneFamily::Cnn, input_sizes: &[299], feature_layer: "mixed10", weights: WeightSource::External },
    RegistryEntry { name: "xception", family: BackboneFamily::Cnn, input_sizes: &[299], feature_layer: "block14_sepconv2_act", weights: WeightSource::External },
    RegistryEntry { name: "efficientnet_b0", family: BackboneFamily::Cnn, input_sizes: &[224], feature_layer: "top_activation", weights: WeightSource::External },
    RegistryEntry { name: "mobilenet_v2", family: BackboneFamily::Cnn, input_sizes: &[224], feature_layer: "out_relu", weights: WeightSource::External },
    RegistryEntry { name: "vit_b16", family: BackboneFamily::Transformer, input_sizes: &[224], feature_layer: "encoder_norm", weights: WeightSource::External },
    RegistryEntry { name: "swin_t", family: BackboneFamily::Transformer, input_sizes: &[224], feature_layer: "stage4_norm", weights: WeightSource::External },
    RegistryEntry { name: "convnext_tiny", family: BackboneFamily::Cnn, input_sizes: &[224], feature_layer: "stage4", weights: WeightSource::External },
];

pub fn registry_entry(name: &str) -> Result<&'static RegistryEntry, ModelError> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| ModelError::UnknownBackbone(name.to_string()))
}

/// (name, in, out) for the bundled five-stage stride-2 network.
const TINY_CNN_LAYERS: [(&str, usize, usize); 5] = [
    ("conv1", 3, 16),
    ("conv2", 16, 32),
    ("conv3", 32, 64),
    ("conv4", 64, 64),
    ("conv5", 64, 128),
];

/// A stack of conv+ReLU stages. Every stage's output is a spatial activation
/// addressable by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub layers: Vec<ConvLayer>,
}

impl Backbone {
    /// Builds a registry backbone. `seed` is only used when the spec asks for
    /// random (non-pretrained) weights.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self, ModelError> {
        let entry = registry_entry(&spec.name)?;
        if entry.weights == WeightSource::External {
            return Err(ModelError::WeightsUnavailable(spec.name.clone()));
        }
        if !entry.input_sizes.contains(&spec.input_size) {
            return Err(ModelError::InvalidConfig(format!(
                "{} accepts input sizes {:?}, got {}",
                spec.name, entry.input_sizes, spec.input_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(if spec.pretrained { TINY_CNN_WEIGHT_SEED } else { seed });
        let layers: Vec<ConvLayer> = TINY_CNN_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(name, cin, cout))| {
                let weight = if i == 0 && spec.pretrained {
                    first_layer_filters()
                } else if spec.pretrained {
                    let mut w = he_normal(&mut rng, 9 * cin, 9 * cin * cout);
                    carry_through(&mut w, cin, cout, PATHWAY_CHANNELS);
                    w
                } else {
                    he_normal(&mut rng, 9 * cin, 9 * cin * cout)
                };
                ConvLayer {
                    name: name.to_string(),
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    weight,
                    bias: vec![0.0; cout],
                }
            })
            .collect();
        let bb = Self { spec: spec.clone(), layers };
        bb.layer_index(&spec.feature_layer)?;
        Ok(bb)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize, ModelError> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ModelError::LayerNotFound(name.to_string()))
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.forward_range(x, 0, self.layers.len())
    }

    /// Runs layers `[from, to)`.
    pub fn forward_range(&self, x: &FeatureMap, from: usize, to: usize) -> FeatureMap {
        let mut cur = x.clone();
        for layer in &self.layers[from..to] {
            cur = layer.forward(&cur);
        }
        cur
    }
}

/// Number of first-layer responses copied unchanged through every later stage.
const PATHWAY_CHANNELS: usize = 16;
const PATHWAY_GAIN: f64 = 2.0;

/// Turns output channels `0..n` into centre-tap copies of input channels
/// `0..n`. Inputs are post-ReLU, so the copy survives the next ReLU intact.
fn carry_through(w: &mut [f64], cin: usize, cout: usize, n: usize) {
    for o in 0..n {
        for row in 0..9 * cin {
            w[row * cout + o] = 0.0;
        }
        w[((3 + 1) * cin + o) * cout + o] = PATHWAY_GAIN;
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Sixteen 3×3 colour, colour-opponent, and edge filters. Laid out to match
/// [`ConvLayer::weight`]: index `((ky·3 + kx)·3 + c)·16 + o`.
fn first_layer_filters() -> Vec<f64> {
    const OUT: usize = 16;
    let box3 = [[1.0 / 9.0; 3]; 3];
    let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]].map(|r| r.map(|v: f64| v / 4.0));
    let sobel_y = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]].map(|r| r.map(|v: f64| v / 4.0));
    let lap = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]].map(|r| r.map(|v: f64| v / 2.0));
    let lum = [1.0 / 3.0; 3];
    // (spatial kernel, per-channel mix)
    let filters: [([[f64; 3]; 3], [f64; 3]); OUT] = [
        (box3, [1.0, 0.0, 0.0]),
        (box3, [0.0, 1.0, 0.0]),
        (box3, [0.0, 0.0, 1.0]),
        (box3, [1.0, -1.0, 0.0]),
        (box3, [-1.0, 1.0, 0.0]),
        (box3, [0.0, 1.0, -1.0]),
        (box3, [0.0, -1.0, 1.0]),
        (box3, [1.0, 0.0, -1.0]),
        (box3, [-1.0, 0.0, 1.0]),
        (box3, lum),
        (sobel_x, lum),
        (sobel_x.map(|r| r.map(|v| -v)), lum),
        (sobel_y, lum),
        (sobel_y.map(|r| r.map(|v| -v)), lum),
        (lap, lum),
        (lap.map(|r| r.map(|v| -v)), lum),
    ];
    let mut w = vec![0.0; 9 * 3 * OUT];
    for (o, (kernel, mix)) in filters.iter().enumerate() {
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..3 {
                    w[((ky * 3 + kx) * 3 + c) * OUT + o] = kernel[ky][kx] * mix[c];
                }
            }
        }
    }
    w
}
