use std::path::Path;

use image::{Rgb, RgbImage};

use super::ConfusionMatrix;

const CELL_W: u32 = 44;
const CELL_H: u32 = 26;
const MARGIN: u32 = 30;
const SCALE: u32 = 2;

/// 3×5 bitmap digits, one row per `u8`, top to bottom, MSB-first in the low
/// three bits.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn draw_number(img: &mut RgbImage, value: u64, cx: u32, cy: u32, color: Rgb<u8>) {
    let text = value.to_string();
    let glyph_w = 4 * SCALE;
    let total_w = text.len() as u32 * glyph_w - SCALE;
    let x0 = cx.saturating_sub(total_w / 2);
    let y0 = cy.saturating_sub(5 * SCALE / 2);
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let x = x0 + i as u32 * glyph_w + col * SCALE + dx;
                        let y = y0 + row as u32 * SCALE + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// Heat-map of the confusion matrix: rows are true classes, columns are
/// predictions, shading is the row-normalised fraction and each cell carries
/// its count. Axis ticks are class indices.
pub fn render_confusion_png(cm: &ConfusionMatrix) -> RgbImage {
    let k = cm.k() as u32;
    let width = MARGIN + k * CELL_W + 2;
    let height = MARGIN + k * CELL_H + 2;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for t in 0..k {
        let support = cm.support(t as usize).max(1) as f64;
        for p in 0..k {
            let count = cm.counts[t as usize][p as usize];
            let frac = count as f64 / support;
            let shade = |lo: f64, hi: f64| (hi + (lo - hi) * frac).round() as u8;
            let fill = Rgb([shade(8.0, 247.0), shade(48.0, 251.0), shade(107.0, 255.0)]);
            let x0 = MARGIN + p * CELL_W;
            let y0 = MARGIN + t * CELL_H;
            for y in y0..y0 + CELL_H {
                for x in x0..x0 + CELL_W {
                    let border = x == x0 || y == y0;
                    img.put_pixel(x, y, if border { Rgb([200, 200, 200]) } else { fill });
                }
            }
            let ink = if frac > 0.5 { Rgb([255, 255, 255]) } else { Rgb([20, 20, 20]) };
            draw_number(&mut img, count, x0 + CELL_W / 2, y0 + CELL_H / 2, ink);
        }
        draw_number(&mut img, t as u64, MARGIN / 2, MARGIN + t * CELL_H + CELL_H / 2, Rgb([60, 60, 60]));
        draw_number(&mut img, t as u64, MARGIN + t * CELL_W + CELL_W / 2, MARGIN / 2, Rgb([60, 60, 60]));
    }
    img
}

pub fn write_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<(), image::ImageError> {
    render_confusion_png(cm).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_shading_follow_counts() {
        let cm = ConfusionMatrix::from_counts(vec![vec![9, 1, 0], vec![0, 5, 5], vec![0, 0, 7]]).unwrap();
        let img = render_confusion_png(&cm);
        assert_eq!(img.dimensions(), (MARGIN + 3 * CELL_W + 2, MARGIN + 3 * CELL_H + 2));
        // Corner pixel of each cell interior avoids the digits.
        let at = |t: u32, p: u32| *img.get_pixel(MARGIN + p * CELL_W + 2, MARGIN + t * CELL_H + 2);
        assert!(at(0, 0)[0] < at(0, 1)[0]);
        assert_eq!(at(0, 2), Rgb([247, 251, 255]));
        assert_eq!(at(2, 2), Rgb([8, 48, 107]));
    }

    #[test]
    fn written_file_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.png");
        let cm = ConfusionMatrix::from_counts(vec![vec![1234, 0], vec![3, 4]]).unwrap();
        write_confusion_png(&cm, &path).unwrap();
        let back = image::open(&path).unwrap();
        assert_eq!(back.width(), MARGIN + 2 * CELL_W + 2);
    }
}
