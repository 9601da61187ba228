use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::gradcam::GradCamHeatmap;
use super::lime::{LimeConfig, LimeExplanation};
use super::slic::SuperpixelMap;
use super::ExplainError;

pub const LIME_ALPHA: f64 = 0.45;
pub const GRADCAM_ALPHA: f64 = 0.5;
/// White gap between composite panels.
pub const GUTTER: u32 = 8;

const GREEN: [f64; 3] = [0.0, 200.0, 0.0];
const RED: [f64; 3] = [220.0, 0.0, 0.0];

/// Blue → cyan → yellow → red ("jet") for `t` in [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn blend(px: [u8; 3], color: [f64; 3], a: f64) -> [u8; 3] {
    std::array::from_fn(|c| (px[c] as f64 * (1.0 - a) + color[c] * a).round().clamp(0.0, 255.0) as u8)
}

fn check_dims(image: &RgbImage, expected: (u32, u32)) -> Result<(), ExplainError> {
    if image.dimensions() != expected {
        return Err(ExplainError::DimensionMismatch { expected, found: image.dimensions() });
    }
    Ok(())
}

impl SuperpixelMap {
    /// Nearest-neighbour rescale of the partition.
    pub fn resized(&self, width: u32, height: u32) -> SuperpixelMap {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut ids = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            let sy = ((y as u64 * self.height as u64) / height as u64) as u32;
            for x in 0..width {
                let sx = ((x as u64 * self.width as u64) / width as u64) as u32;
                ids.push(self.id(sx, sy));
            }
        }
        SuperpixelMap { width, height, segment_ids: ids, num_segments: self.num_segments }
    }
}

impl LimeExplanation {
    /// The same explanation with its superpixels mapped onto a
    /// `width × height` image.
    pub fn at_resolution(&self, width: u32, height: u32) -> LimeExplanation {
        LimeExplanation { superpixels: self.superpixels.resized(width, height), ..self.clone() }
    }
}

/// Tints the `top_k` strongest supporting segments green and the `top_k`
/// strongest opposing segments red; every other pixel is left untouched.
pub fn render_lime(image: &RgbImage, explanation: &LimeExplanation, top_k: usize) -> Result<RgbImage, ExplainError> {
    let sp = &explanation.superpixels;
    check_dims(image, (sp.width, sp.height))?;
    let (pos, neg) = explanation.top_segments(top_k);
    let mut tint = vec![None; sp.num_segments];
    pos.iter().for_each(|&s| tint[s] = Some(GREEN));
    neg.iter().for_each(|&s| tint[s] = Some(RED));
    let mut out = image.clone();
    for (px, &s) in out.pixels_mut().zip(&sp.segment_ids) {
        if let Some(color) = tint[s as usize] {
            px.0 = blend(px.0, color, LIME_ALPHA);
        }
    }
    Ok(out)
}

/// Segment weights as a diverging map: green for support, red for
/// opposition, white at zero, scaled by the largest magnitude.
pub fn lime_weight_panel(explanation: &LimeExplanation) -> RgbImage {
    let sp = &explanation.superpixels;
    let max = explanation.segment_weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let colors: Vec<[u8; 3]> = explanation
        .segment_weights
        .iter()
        .map(|&w| {
            let t = if max > 0.0 { w / max } else { 0.0 };
            let target = if t >= 0.0 { GREEN } else { RED };
            blend([255, 255, 255], target, t.abs())
        })
        .collect();
    RgbImage::from_fn(sp.width, sp.height, |x, y| Rgb(colors[sp.id(x, y) as usize]))
}

/// Heatmap through [`colormap`].
pub fn heatmap_panel(heatmap: &GradCamHeatmap) -> RgbImage {
    RgbImage::from_fn(heatmap.width, heatmap.height, |x, y| Rgb(colormap(heatmap.at(x, y))))
}

/// `out = img·(1 − a·h) + colormap(h)·a·h` with `a` = [`GRADCAM_ALPHA`], so
/// pixels with zero heat are unchanged.
pub fn render_gradcam(image: &RgbImage, heatmap: &GradCamHeatmap) -> Result<RgbImage, ExplainError> {
    check_dims(image, (heatmap.width, heatmap.height))?;
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let h = heatmap.map[i];
        if h > 0.0 {
            let c = colormap(h).map(f64::from);
            px.0 = blend(px.0, c, GRADCAM_ALPHA * h);
        }
    }
    Ok(out)
}

/// Panels side by side with [`GUTTER`]-wide white gaps.
pub fn composite(panels: &[&RgbImage]) -> Result<RgbImage, ExplainError> {
    let Some(first) = panels.first() else {
        return Err(ExplainError::InvalidConfig("composite needs at least one panel".into()));
    };
    let (w, h) = first.dimensions();
    for p in panels {
        check_dims(p, (w, h))?;
    }
    let n = panels.len() as u32;
    let mut out = RgbImage::from_pixel(n * w + (n - 1) * GUTTER, h, Rgb([255, 255, 255]));
    for (i, p) in panels.iter().enumerate() {
        imageops::replace(&mut out, *p, (i as u32 * (w + GUTTER)) as i64, 0);
    }
    Ok(out)
}

/// Original | segment-weight map | tinted overlay.
pub fn composite_lime(image: &RgbImage, explanation: &LimeExplanation, top_k: usize) -> Result<RgbImage, ExplainError> {
    let overlay = render_lime(image, explanation, top_k)?;
    composite(&[image, &lime_weight_panel(explanation), &overlay])
}

/// Original | heatmap | blended overlay.
pub fn composite_gradcam(image: &RgbImage, heatmap: &GradCamHeatmap) -> Result<RgbImage, ExplainError> {
    let overlay = render_gradcam(image, heatmap)?;
    composite(&[image, &heatmap_panel(heatmap), &overlay])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeSummary {
    pub segment_weights: Vec<f64>,
    pub intercept: f64,
    pub surrogate_r2: f64,
    pub num_segments: usize,
    pub top_positive: Vec<usize>,
    pub top_negative: Vec<usize>,
    pub config: LimeConfig,
}

impl LimeSummary {
    pub fn new(e: &LimeExplanation, config: &LimeConfig) -> Self {
        let (top_positive, top_negative) = e.top_segments(config.top_k);
        Self {
            segment_weights: e.segment_weights.clone(),
            intercept: e.intercept,
            surrogate_r2: e.surrogate_r2,
            num_segments: e.superpixels.num_segments,
            top_positive,
            top_negative,
            config: config.clone(),
        }
    }
}

/// Metadata written next to rendered explanation images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSidecar {
    pub source: String,
    pub target_class: usize,
    pub target_label: String,
    pub probability: f64,
    pub lime: Option<LimeSummary>,
    pub gradcam: Option<GradCamHeatmap>,
}

/// Writes `<stem>_lime.png` and/or `<stem>_gradcam.png` composites plus
/// `<stem>.json`. Returns the written paths.
pub fn write_explanation(
    out_dir: &Path,
    stem: &str,
    image: &RgbImage,
    lime: Option<&LimeExplanation>,
    gradcam: Option<&GradCamHeatmap>,
    sidecar: &ExplanationSidecar,
) -> Result<Vec<PathBuf>, ExplainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if let Some(e) = lime {
        let top_k = sidecar.lime.as_ref().map_or(LimeConfig::default().top_k, |l| l.config.top_k);
        let e = e.at_resolution(image.width(), image.height());
        let path = out_dir.join(format!("{stem}_lime.png"));
        composite_lime(image, &e, top_k)?.save(&path)?;
        written.push(path);
    }
    if let Some(h) = gradcam {
        let path = out_dir.join(format!("{stem}_gradcam.png"));
        composite_gradcam(image, h)?.save(&path)?;
        written.push(path);
    }
    let path = out_dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(sidecar).expect("sidecar serializes"))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]))
    }

    fn quadrant_explanation(weights: Vec<f64>) -> LimeExplanation {
        let sp = SuperpixelMap {
            width: 20,
            height: 20,
            segment_ids: (0..400).map(|i| ((i % 20) / 10 + 2 * ((i / 20) / 10)) as u32).collect(),
            num_segments: 4,
        };
        LimeExplanation {
            segment_weights: weights,
            intercept: 0.1,
            surrogate_r2: 0.9,
            target_class: 0,
            superpixels: sp,
            samples: Vec::new(),
        }
    }

    #[test]
    fn zero_heatmap_leaves_image_unchanged() {
        let img = checker(17, 9);
        let hm = GradCamHeatmap {
            width: 17,
            height: 9,
            map: vec![0.0; 17 * 9],
            source_layer: "conv5".into(),
            target_class: 0,
            all_zero: true,
        };
        assert_eq!(render_gradcam(&img, &hm).unwrap(), img);
    }

    #[test]
    fn one_positive_segment_gives_one_green_region() {
        let img = RgbImage::from_pixel(20, 20, Rgb([100, 100, 100]));
        let e = quadrant_explanation(vec![0.0, 0.3, 0.0, 0.0]);
        let out = render_lime(&img, &e, 1).unwrap();
        let changed: Vec<(u32, u32)> = out
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0 != [100, 100, 100])
            .map(|(x, y, _)| (x, y))
            .collect();
        assert_eq!(changed.len(), 100);
        assert!(changed.iter().all(|&(x, y)| x >= 10 && y < 10));
        let p = out.get_pixel(15, 5).0;
        assert!(p[1] > p[0] && p[1] > p[2]);
    }

    #[test]
    fn negative_segments_are_red_and_top_k_limits() {
        let img = RgbImage::from_pixel(20, 20, Rgb([100, 100, 100]));
        let e = quadrant_explanation(vec![0.5, 0.1, -0.4, -0.05]);
        let out = render_lime(&img, &e, 1).unwrap();
        assert!(out.get_pixel(2, 2).0[1] > 100);
        assert_eq!(out.get_pixel(15, 2).0, [100, 100, 100]);
        let red = out.get_pixel(2, 15).0;
        assert!(red[0] > red[1]);
        assert_eq!(out.get_pixel(15, 15).0, [100, 100, 100]);
    }

    #[test]
    fn composite_layout() {
        let img = checker(30, 12);
        let hm = GradCamHeatmap {
            width: 30,
            height: 12,
            map: (0..360).map(|i| (i % 30) as f64 / 29.0).collect(),
            source_layer: "conv5".into(),
            target_class: 0,
            all_zero: false,
        };
        let c = composite_gradcam(&img, &hm).unwrap();
        assert_eq!(c.dimensions(), (3 * 30 + 2 * GUTTER, 12));
        assert_eq!(*c.get_pixel(31, 3), Rgb([255, 255, 255]));
        assert_eq!(c.get_pixel(5, 5), img.get_pixel(5, 5));
        assert_eq!(c.get_pixel(30 + GUTTER, 0).0, colormap(0.0));
        // Deterministic bytes for a fixed input.
        assert_eq!(c, composite_gradcam(&img, &hm).unwrap());
        let wrong = checker(29, 12);
        assert!(matches!(render_gradcam(&wrong, &hm), Err(ExplainError::DimensionMismatch { .. })));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(1.0), [128, 0, 0]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
    }

    #[test]
    fn resized_partition_keeps_quadrants() {
        let e = quadrant_explanation(vec![0.0; 4]).at_resolution(50, 30);
        assert_eq!(e.superpixels.id(0, 0), 0);
        assert_eq!(e.superpixels.id(49, 0), 1);
        assert_eq!(e.superpixels.id(0, 29), 2);
        assert_eq!(e.superpixels.segment_ids.len(), 1500);
    }

    #[test]
    fn sidecar_and_images_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(40, 40, Rgb([90, 90, 90]));
        let e = quadrant_explanation(vec![0.2, -0.1, 0.0, 0.05]);
        let sidecar = ExplanationSidecar {
            source: "x.png".into(),
            target_class: 0,
            target_label: "a".into(),
            probability: 0.8,
            lime: Some(LimeSummary::new(&e, &LimeConfig::default())),
            gradcam: None,
        };
        let paths = write_explanation(dir.path(), "x", &img, Some(&e), None, &sidecar).unwrap();
        assert_eq!(paths.len(), 2);
        let png = image::open(&paths[0]).unwrap();
        assert_eq!(png.width(), 3 * 40 + 2 * GUTTER);
        let back: ExplanationSidecar = serde_json::from_str(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
        assert_eq!(back, sidecar);
    }
}
