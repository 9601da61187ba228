//! LIME for images: random superpixel masks, a locality kernel around the
//! unperturbed image, and a weighted ridge surrogate.

use image::{imageops, RgbImage};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::slic::{segment_superpixels, SuperpixelMap, SuperpixelParams};
use super::ExplainError;
use crate::dataset::preprocess_rgb;
use crate::model::ClassifierModel;

/// Anything that maps RGB images to class probabilities.
pub trait ProbabilityModel: Sync {
    fn num_classes(&self) -> usize;

    /// The image at the resolution perturbations are evaluated at.
    fn working_image(&self, image: &RgbImage) -> RgbImage {
        image.clone()
    }

    fn predict_batch(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>, ExplainError>;
}

impl ProbabilityModel for ClassifierModel {
    fn num_classes(&self) -> usize {
        ClassifierModel::num_classes(self)
    }

    /// Resized to the model input so per-sample preprocessing is a plain
    /// normalisation.
    fn working_image(&self, image: &RgbImage) -> RgbImage {
        let s = self.preprocess.target_size;
        if image.dimensions() == (s, s) {
            image.clone()
        } else {
            imageops::resize(image, s, s, imageops::FilterType::Triangle)
        }
    }

    fn predict_batch(&self, images: &[RgbImage]) -> Result<Vec<Vec<f64>>, ExplainError> {
        let xs = images
            .iter()
            .map(|img| preprocess_rgb(img, &self.preprocess))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ExplainError::ModelQuery(e.to_string()))?;
        Ok(self.predict_probs(&xs)?)
    }
}

/// Replacement for switched-off segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    SegmentMean,
    Color([u8; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge_penalty: f64,
    /// Segments shown per sign when rendering.
    pub top_k: usize,
    pub baseline: Baseline,
    pub seed: u64,
    pub superpixels: SuperpixelParams,
    /// Perturbed images evaluated per model call.
    pub batch_size: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            kernel_width: 0.25,
            ridge_penalty: 1.0,
            top_k: 5,
            baseline: Baseline::SegmentMean,
            seed: 0,
            superpixels: SuperpixelParams::default(),
            batch_size: 64,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self, num_segments: usize) -> Result<(), ExplainError> {
        if num_segments == 0 {
            return Err(ExplainError::NoSegments);
        }
        if self.num_samples < num_segments {
            return Err(ExplainError::InvalidConfig(format!(
                "num_samples {} must be at least the segment count {num_segments}",
                self.num_samples
            )));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(ExplainError::InvalidConfig(format!("kernel_width {} must be > 0", self.kernel_width)));
        }
        if !(self.ridge_penalty >= 0.0 && self.ridge_penalty.is_finite()) {
            return Err(ExplainError::InvalidConfig(format!("ridge_penalty {} must be ≥ 0", self.ridge_penalty)));
        }
        if self.batch_size == 0 {
            return Err(ExplainError::InvalidConfig("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// One perturbation: which segments were kept, the model's target
/// probability, and the locality weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeSample {
    pub mask: Vec<bool>,
    pub target_prob: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeExplanation {
    pub segment_weights: Vec<f64>,
    pub intercept: f64,
    pub surrogate_r2: f64,
    pub target_class: usize,
    pub superpixels: SuperpixelMap,
    #[serde(skip)]
    pub samples: Vec<LimeSample>,
}

impl LimeExplanation {
    /// Segments ordered by weight, strongest first, at most `k` per sign.
    pub fn top_segments(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.segment_weights.len()).collect();
        order.sort_by(|&a, &b| self.segment_weights[b].abs().total_cmp(&self.segment_weights[a].abs()).then(a.cmp(&b)));
        let positive = order.iter().copied().filter(|&s| self.segment_weights[s] > 0.0).take(k).collect();
        let negative = order.iter().copied().filter(|&s| self.segment_weights[s] < 0.0).take(k).collect();
        (positive, negative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Weighted R² on the fitted samples, clamped to [0, 1]; 1 when the
    /// targets are constant.
    pub r2: f64,
}

/// Weighted ridge regression with an unpenalised intercept:
/// `min Σ wᵢ (yᵢ − b − xᵢ·β)² + λ‖β‖²`.
pub fn weighted_ridge(xs: &[Vec<f64>], ys: &[f64], ws: &[f64], lambda: f64) -> Result<RidgeFit, ExplainError> {
    let n = xs.len();
    let p = xs.first().map_or(0, Vec::len);
    if n == 0 || ys.len() != n || ws.len() != n || p == 0 {
        return Err(ExplainError::InvalidConfig("ridge needs matching, non-empty samples".into()));
    }
    let wsum: f64 = ws.iter().sum();
    if !(wsum > 0.0) {
        return Err(ExplainError::InvalidConfig("sample weights sum to zero".into()));
    }
    let xbar: Vec<f64> = (0..p).map(|j| xs.iter().zip(ws).map(|(x, w)| w * x[j]).sum::<f64>() / wsum).collect();
    let ybar = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / wsum;

    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for ((x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let xc: Vec<f64> = x.iter().zip(&xbar).map(|(v, m)| v - m).collect();
        for i in 0..p {
            b[i] += w * xc[i] * (y - ybar);
            for j in 0..p {
                a[(i, j)] += w * xc[i] * xc[j];
            }
        }
    }
    for i in 0..p {
        a[(i, i)] += lambda;
    }
    let beta = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| ExplainError::InvalidConfig(format!("ridge system: {e}")))?,
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = ybar - xbar.iter().zip(&coefficients).map(|(m, c)| m * c).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for ((x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let pred = intercept + x.iter().zip(&coefficients).map(|(v, c)| v * c).sum::<f64>();
        ss_res += w * (y - pred).powi(2);
        ss_tot += w * (y - ybar).powi(2);
    }
    let r2 = if ss_tot <= 1e-18 * wsum { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(RidgeFit { coefficients, intercept, r2 })
}

/// Cosine distance between a mask and the all-ones mask; 1 for the empty
/// mask.
fn cosine_distance_to_ones(mask: &[bool]) -> f64 {
    let on = mask.iter().filter(|&&b| b).count();
    if on == 0 {
        return 1.0;
    }
    1.0 - (on as f64 / mask.len() as f64).sqrt()
}

/// Draws the perturbation masks: the all-ones mask first, then independent
/// Bernoulli(0.5) masks.
fn draw_masks(num_segments: usize, config: &LimeConfig) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut masks = vec![vec![true; num_segments]];
    while masks.len() < config.num_samples {
        masks.push((0..num_segments).map(|_| rng.gen_bool(0.5)).collect());
    }
    masks
}

/// Runs LIME against a function of the mask alone: `query` receives a batch
/// of masks and returns the target probability for each.
pub fn lime_fit(
    num_segments: usize,
    config: &LimeConfig,
    mut query: impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
) -> Result<(RidgeFit, Vec<LimeSample>), ExplainError> {
    config.validate(num_segments)?;
    let masks = draw_masks(num_segments, config);
    let mut samples = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(config.batch_size) {
        let probs = query(chunk)?;
        if probs.len() != chunk.len() {
            return Err(ExplainError::ModelQuery(format!(
                "expected {} probabilities, got {}",
                chunk.len(),
                probs.len()
            )));
        }
        for (mask, p) in chunk.iter().zip(probs) {
            if !p.is_finite() {
                return Err(ExplainError::ModelQuery(format!("non-finite probability {p}")));
            }
            let d = cosine_distance_to_ones(mask);
            samples.push(LimeSample {
                mask: mask.clone(),
                target_prob: p,
                weight: (-d * d / (config.kernel_width * config.kernel_width)).exp(),
            });
        }
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.mask.iter().map(|&b| f64::from(u8::from(b))).collect()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.target_prob).collect();
    let ws: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let fit = weighted_ridge(&xs, &ys, &ws, config.ridge_penalty)?;
    Ok((fit, samples))
}

/// Builds the perturbed image for one mask.
fn perturb(image: &RgbImage, sp: &SuperpixelMap, fills: &[[u8; 3]], mask: &[bool]) -> RgbImage {
    let mut out = image.clone();
    for (px, &s) in out.pixels_mut().zip(&sp.segment_ids) {
        if !mask[s as usize] {
            px.0 = fills[s as usize];
        }
    }
    out
}

/// LIME explanation of `model`'s probability for `target_class`. Superpixels
/// and perturbations live at the model's working resolution.
pub fn lime_explain<M: ProbabilityModel + ?Sized>(
    model: &M,
    image: &RgbImage,
    target_class: usize,
    config: &LimeConfig,
) -> Result<LimeExplanation, ExplainError> {
    let classes = model.num_classes();
    if target_class >= classes {
        return Err(ExplainError::ClassOutOfRange { class: target_class, classes });
    }
    let work = model.working_image(image);
    let sp = segment_superpixels(&work, &config.superpixels)?;
    let fills = match config.baseline {
        Baseline::SegmentMean => sp.mean_colors(&work),
        Baseline::Color(c) => vec![c; sp.num_segments],
    };
    let (fit, samples) = lime_fit(sp.num_segments, config, |masks| {
        let batch: Vec<RgbImage> = masks.iter().map(|m| perturb(&work, &sp, &fills, m)).collect();
        let probs = model.predict_batch(&batch)?;
        probs
            .iter()
            .map(|row| {
                row.get(target_class)
                    .copied()
                    .ok_or_else(|| ExplainError::ModelQuery(format!("model returned {} classes", row.len())))
            })
            .collect()
    })?;
    Ok(LimeExplanation {
        segment_weights: fit.coefficients,
        intercept: fit.intercept,
        surrogate_r2: fit.r2,
        target_class,
        superpixels: sp,
        samples,
    })
}
