use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::dataset::preprocess_rgb;
use crate::model::ClassifierModel;
use crate::tensor::FeatureMap;

/// Max-normalised class-activation map at image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamHeatmap {
    pub width: u32,
    pub height: u32,
    /// Row-major values in [0, 1].
    #[serde(skip)]
    pub map: Vec<f64>,
    pub source_layer: String,
    pub target_class: usize,
    /// Set when the raw map had no positive evidence anywhere.
    pub all_zero: bool,
}

impl GradCamHeatmap {
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.map[(y * self.width + x) as usize]
    }

    /// Fraction of total heat inside the rectangle `[x0, x1) × [y0, y1)`.
    pub fn mass_in(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> f64 {
        let total: f64 = self.map.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                inside += self.at(x, y);
            }
        }
        inside / total
    }
}

/// Bilinear resize of a single-channel `h × w` grid with half-pixel centres.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sample = |pos: f64, n: usize| {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = sample((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = sample((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Grad-CAM from an activation `A` and its gradient `G` (same shape):
/// `α_c = mean(G_c)`, map `= ReLU(Σ α_c A_c)`, upsampled and divided by its
/// maximum.
pub fn gradcam_from_activations(
    activation: &FeatureMap,
    gradient: &FeatureMap,
    out_width: u32,
    out_height: u32,
    source_layer: &str,
    target_class: usize,
) -> Result<GradCamHeatmap, ExplainError> {
    let (h, w, c) = activation.shape();
    if h == 0 || w == 0 || c == 0 || out_width == 0 || out_height == 0 {
        return Err(ExplainError::EmptyActivation(source_layer.to_string()));
    }
    if gradient.shape() != activation.shape() {
        return Err(ExplainError::InvalidConfig(format!(
            "gradient shape {:?} differs from activation shape {:?}",
            gradient.shape(),
            activation.shape()
        )));
    }
    let mut alpha = vec![0.0; c];
    for cell in gradient.data.chunks_exact(c) {
        alpha.iter_mut().zip(cell).for_each(|(a, g)| *a += g);
    }
    alpha.iter_mut().for_each(|a| *a /= (h * w) as f64);
    let raw: Vec<f64> = activation
        .data
        .chunks_exact(c)
        .map(|cell| cell.iter().zip(&alpha).map(|(a, al)| a * al).sum::<f64>().max(0.0))
        .collect();
    let mut map = upsample_bilinear(&raw, h, w, out_height as usize, out_width as usize);
    let max = map.iter().copied().fold(0.0, f64::max);
    let all_zero = !(max > 0.0) || !max.is_finite();
    if all_zero {
        map.iter_mut().for_each(|v| *v = 0.0);
    } else {
        map.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(GradCamHeatmap {
        width: out_width,
        height: out_height,
        map,
        source_layer: source_layer.to_string(),
        target_class,
        all_zero,
    })
}

/// Grad-CAM of `model`'s logit for `target_class` at `layer` (the backbone's
/// feature layer when `None`), at the resolution of `image`.
pub fn gradcam_explain(
    model: &ClassifierModel,
    image: &RgbImage,
    target_class: usize,
    layer: Option<&str>,
) -> Result<GradCamHeatmap, ExplainError> {
    let layer = layer.unwrap_or(&model.backbone.spec.feature_layer);
    let x = preprocess_rgb(image, &model.preprocess).map_err(|e| ExplainError::ModelQuery(e.to_string()))?;
    let (a, g) = model.activations_and_gradients(&x, target_class, layer)?;
    gradcam_from_activations(&a, &g, image.width(), image.height(), layer, target_class)
}
