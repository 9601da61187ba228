//! Synthetic "hue shapes" dataset: each image holds a few filled shapes over a
//! noisy skin-toned background, and the class is the dominant hue of the
//! shapes. Used for desk-scale training runs and end-to-end tests.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassTaxonomy, DatasetError};
use crate::seed::mix_seed;

pub const HUE_CLASSES: [&str; 3] = ["crimson", "olive", "azure"];
const CLASS_HUES: [f64; 3] = [0.0, 110.0, 220.0];

pub fn hue_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy::new(HUE_CLASSES).expect("static taxonomy is valid")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// One image of class `class` (index into [`HUE_CLASSES`]).
pub fn hue_shape_image(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let base = [
        rng.gen_range(160..200) as f64,
        rng.gen_range(125..160) as f64,
        rng.gen_range(105..140) as f64,
    ];
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let n = rng.gen_range(-12.0..12.0);
        Rgb(base.map(|b| (b + n).clamp(0.0, 255.0) as u8))
    });
    let shapes = rng.gen_range(2..=4);
    let s = size as f64;
    for _ in 0..shapes {
        let hue = CLASS_HUES[class] + rng.gen_range(-18.0..18.0);
        let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.95), rng.gen_range(0.55..0.95));
        let cx = rng.gen_range(0.2 * s..0.8 * s);
        let cy = rng.gen_range(0.2 * s..0.8 * s);
        let r = rng.gen_range(0.12 * s..0.28 * s);
        let kind = rng.gen_range(0..3);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match kind {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r && dy.abs() <= r,
                    _ => dy <= r && dy >= -r && dx.abs() <= (r - dy) * 0.5,
                };
                if inside {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    img
}

/// Writes `per_class` PNG images for each hue class under `root/<class>/`.
pub fn write_hue_dataset(
    root: &Path,
    per_class: usize,
    size: u32,
    seed: u64,
) -> Result<ClassTaxonomy, DatasetError> {
    for (class, name) in HUE_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64));
        for i in 0..per_class {
            let img = hue_shape_image(class, size, &mut rng);
            img.save(dir.join(format!("{name}_{i:04}.png")))
                .map_err(|e| DatasetError::Decode {
                    path: dir.display().to_string(),
                    message: e.to_string(),
                })?;
        }
    }
    Ok(hue_taxonomy())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Votes over strongly saturated pixels for the nearest class hue.
    fn dominant_class(img: &RgbImage) -> usize {
        let mut votes = [0usize; 3];
        for p in img.pixels() {
            let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            if max <= 0.0 || (max - min) / max < 0.55 {
                continue;
            }
            let d = max - min;
            let hue = if max == r {
                60.0 * ((g - b) / d).rem_euclid(6.0)
            } else if max == g {
                60.0 * ((b - r) / d + 2.0)
            } else {
                60.0 * ((r - g) / d + 4.0)
            };
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da = (hue - CLASS_HUES[a]).rem_euclid(360.0);
                    let db = (hue - CLASS_HUES[b]).rem_euclid(360.0);
                    da.min(360.0 - da).total_cmp(&db.min(360.0 - db))
                })
                .unwrap();
            votes[nearest] += 1;
        }
        votes.iter().enumerate().max_by_key(|(_, v)| **v).unwrap().0
    }

    #[test]
    fn class_is_recoverable_from_dominant_hue() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut correct = 0;
        for i in 0..60 {
            let class = i % 3;
            let img = hue_shape_image(class, 48, &mut rng);
            if dominant_class(&img) == class {
                correct += 1;
            }
        }
        assert_eq!(correct, 60);
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_hue_dataset(a.path(), 2, 16, 9).unwrap();
        write_hue_dataset(b.path(), 2, 16, 9).unwrap();
        let f = "azure/azure_0001.png";
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}
