use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::tensor::FeatureMap;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Square resize followed by per-channel `(x/255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: u32,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl PreprocessSpec {
    /// ImageNet statistics at the given square size (224 for most backbones,
    /// 299 for Inception-style ones).
    pub fn imagenet(target_size: u32) -> Self {
        Self {
            target_size,
            channel_means: IMAGENET_MEAN,
            channel_stds: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.target_size == 0 {
            return Err(DatasetError::InvalidPreprocess("target size is zero".into()));
        }
        if self
            .channel_stds
            .iter()
            .chain(&self.channel_means)
            .any(|v| !v.is_finite())
            || self.channel_stds.iter().any(|s| *s <= 0.0)
        {
            return Err(DatasetError::InvalidPreprocess(format!(
                "means {:?} / stds {:?}",
                self.channel_means, self.channel_stds
            )));
        }
        Ok(())
    }

    /// Maps a normalized tensor back to 8-bit RGB.
    pub fn denormalize(&self, t: &FeatureMap) -> RgbImage {
        RgbImage::from_fn(t.width as u32, t.height as u32, |x, y| {
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = (t.get(y as usize, x as usize, c) * self.channel_stds[c]
                    + self.channel_means[c])
                    * 255.0;
                v.round().clamp(0.0, 255.0) as u8
            });
            image::Rgb(px)
        })
    }
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self::imagenet(224)
    }
}

/// Converts any decoded image (grayscale replicated, alpha dropped) to a
/// normalized `target × target × 3` tensor.
pub fn preprocess_image(image: &DynamicImage, spec: &PreprocessSpec) -> Result<FeatureMap, DatasetError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(DatasetError::DegenerateImage);
    }
    preprocess_rgb(&image.to_rgb8(), spec)
}

pub fn preprocess_rgb(image: &RgbImage, spec: &PreprocessSpec) -> Result<FeatureMap, DatasetError> {
    spec.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(DatasetError::DegenerateImage);
    }
    let size = spec.target_size;
    let resized;
    let src = if image.dimensions() == (size, size) {
        image
    } else {
        resized = imageops::resize(image, size, size, FilterType::Triangle);
        &resized
    };
    let n = size as usize;
    let mut out = FeatureMap::zeros(n, n, 3);
    for (dst, px) in out.data.chunks_exact_mut(3).zip(src.pixels()) {
        for c in 0..3 {
            dst[c] = (px.0[c] as f64 / 255.0 - spec.channel_means[c]) / spec.channel_stds[c];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, Rgba, RgbaImage};

    #[test]
    fn resizes_to_target_square() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(600, 400, Rgb([10, 20, 30])));
        let t = preprocess_image(&img, &PreprocessSpec::imagenet(224)).unwrap();
        assert_eq!(t.shape(), (224, 224, 3));
        let t = preprocess_image(&img, &PreprocessSpec::imagenet(299)).unwrap();
        assert_eq!(t.shape(), (299, 299, 3));
    }

    #[test]
    fn mean_valued_channel_normalizes_to_zero() {
        // Scale the means so that 255 * mean is an exact 8-bit value.
        let spec = PreprocessSpec {
            target_size: 8,
            channel_means: [128.0 / 255.0, 64.0 / 255.0, 1.0],
            channel_stds: [0.5, 0.25, 0.1],
        };
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(16, 16, Rgb([128, 64, 255])));
        let t = preprocess_image(&img, &spec).unwrap();
        assert!(t.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn grayscale_is_replicated_and_alpha_dropped() {
        let spec = PreprocessSpec::imagenet(4);
        let gray = DynamicImage::ImageLuma8(GrayImage::from_pixel(4, 4, Luma([100])));
        let t = preprocess_image(&gray, &spec).unwrap();
        assert_eq!(t.channels, 3);
        for c in 0..3 {
            let expect = (100.0 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!((t.get(1, 2, c) - expect).abs() < 1e-12);
        }
        let rgba = DynamicImage::ImageRgba8(RgbaImage::from_pixel(4, 4, Rgba([10, 20, 30, 0])));
        let t = preprocess_image(&rgba, &spec).unwrap();
        let expect = (10.0 / 255.0 - IMAGENET_MEAN[0]) / IMAGENET_STD[0];
        assert!((t.get(0, 0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_area_is_degenerate() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(0, 5));
        assert!(matches!(
            preprocess_image(&img, &PreprocessSpec::default()),
            Err(DatasetError::DegenerateImage)
        ));
    }

    #[test]
    fn target_sized_input_roundtrips_through_denormalize() {
        let spec = PreprocessSpec::imagenet(32);
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, ((x + y) * 3) as u8]));
        let t = preprocess_rgb(&img, &spec).unwrap();
        assert_eq!(t.shape(), (32, 32, 3));
        assert_eq!(spec.denormalize(&t), img);
    }
}
