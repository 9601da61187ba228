use image::RgbImage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    /// Minimum variance of the 4-neighbour Laplacian of luminance.
    pub min_sharpness: f64,
    /// Minimum interquartile range of luminance (0–255 scale).
    pub min_contrast: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            min_sharpness: 20.0,
            min_contrast: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub sharpness_score: f64,
    pub contrast_score: f64,
    pub passed: bool,
    pub reasons: Vec<String>,
}

fn luminance(image: &RgbImage) -> Vec<f64> {
    image
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(image: &RgbImage) -> f64 {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let lum = luminance(image);
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = lum[y * w + x];
            let r = lum[(y - 1) * w + x] + lum[(y + 1) * w + x] + lum[y * w + x - 1]
                + lum[y * w + x + 1]
                - 4.0 * c;
            responses.push(r);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

/// Linear-interpolated percentile of a sorted slice, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Interquartile range of luminance.
pub fn luminance_iqr(image: &RgbImage) -> f64 {
    let mut lum = luminance(image);
    lum.sort_by(|a, b| a.total_cmp(b));
    percentile(&lum, 0.75) - percentile(&lum, 0.25)
}

/// Scores capture quality. The report is advisory; callers decide whether a
/// failed gate blocks classification.
pub fn quality_gate(image: &RgbImage, thresholds: &QualityThresholds) -> QualityReport {
    let sharpness_score = laplacian_variance(image);
    let contrast_score = luminance_iqr(image);
    let mut reasons = Vec::new();
    if sharpness_score < thresholds.min_sharpness {
        reasons.push(format!(
            "low sharpness ({sharpness_score:.1} < {:.1}); image may be blurred",
            thresholds.min_sharpness
        ));
    }
    if contrast_score < thresholds.min_contrast {
        reasons.push(format!(
            "low contrast ({contrast_score:.1} < {:.1})",
            thresholds.min_contrast
        ));
    }
    QualityReport {
        sharpness_score,
        contrast_score,
        passed: reasons.is_empty(),
        reasons,
    }
}
