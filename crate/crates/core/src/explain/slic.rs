//! SLIC-style superpixels: local k-means in CIELAB colour + position,
//! followed by connectivity enforcement.

use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::ExplainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpixelParams {
    pub target_segments: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    /// Weight of spatial distance relative to colour distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SuperpixelParams {
    fn default() -> Self {
        Self {
            target_segments: 40,
            min_segments: 8,
            max_segments: 80,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

impl SuperpixelParams {
    pub fn exact(segments: usize) -> Self {
        Self {
            target_segments: segments,
            min_segments: segments,
            max_segments: segments,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.min_segments == 0
            || self.min_segments > self.max_segments
            || self.target_segments == 0
            || !(self.compactness > 0.0)
        {
            return Err(ExplainError::InvalidConfig(format!(
                "superpixel parameters: need 0 < min ≤ max, target > 0, compactness > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Partition of an image into 4-connected segments labelled `0..num_segments`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    pub width: u32,
    pub height: u32,
    /// Row-major segment id per pixel.
    pub segment_ids: Vec<u32>,
    pub num_segments: usize,
}

impl SuperpixelMap {
    pub fn id(&self, x: u32, y: u32) -> u32 {
        self.segment_ids[(y * self.width + x) as usize]
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &s in &self.segment_ids {
            sizes[s as usize] += 1;
        }
        sizes
    }

    /// Per-segment mean colour.
    pub fn mean_colors(&self, image: &RgbImage) -> Vec<[u8; 3]> {
        let mut sums = vec![[0u64; 3]; self.num_segments];
        let mut counts = vec![0u64; self.num_segments];
        for (px, &s) in image.pixels().zip(&self.segment_ids) {
            for c in 0..3 {
                sums[s as usize][c] += px[c] as u64;
            }
            counts[s as usize] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| {
                let n = n.max(1);
                [0, 1, 2].map(|c| ((s[c] + n / 2) / n) as u8)
            })
            .collect()
    }

    /// True when every segment is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut seen = vec![false; w * h];
        let mut visited_segment = vec![false; self.num_segments];
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            let s = self.segment_ids[start] as usize;
            if visited_segment[s] {
                return false;
            }
            visited_segment[s] = true;
            flood(&self.segment_ids, w, h, start, &mut seen, |_| {});
        }
        true
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Grid of roughly square cells whose count is close to `target`.
fn grid(width: usize, height: usize, target: usize) -> (usize, usize) {
    let cols = ((target as f64 * width as f64 / height as f64).sqrt().ceil() as usize).clamp(1, width);
    let rows = target.div_ceil(cols).clamp(1, height);
    (rows, cols)
}

/// Breadth-first fill of the 4-connected component containing `start`.
fn flood(labels: &[u32], w: usize, h: usize, start: usize, seen: &mut [bool], mut visit: impl FnMut(usize)) {
    let label = labels[start];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        visit(i);
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if !seen[j] && labels[j] == label {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
}

struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn kmeans(lab: &[[f64; 3]], w: usize, h: usize, target: usize, params: &SuperpixelParams) -> Vec<u32> {
    let (rows, cols) = grid(w, h, target);
    let step = ((w * h) as f64 / (rows * cols) as f64).sqrt();
    let mut centers: Vec<Center> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = (c as f64 + 0.5) * w as f64 / cols as f64;
            let y = (r as f64 + 0.5) * h as f64 / rows as f64;
            let idx = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            centers.push(Center { lab: lab[idx], x, y });
        }
    }
    let spatial = (params.compactness / step).powi(2);
    let radius = (2.0 * step).ceil() as isize;
    let mut labels = vec![0u32; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..params.iterations.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, ctr) in centers.iter().enumerate() {
            let (cx, cy) = (ctr.x as isize, ctr.y as isize);
            for y in (cy - radius).max(0)..(cy + radius + 1).min(h as isize) {
                for x in (cx - radius).max(0)..(cx + radius + 1).min(w as isize) {
                    let i = y as usize * w + x as usize;
                    let dc: f64 = (0..3).map(|c| (lab[i][c] - ctr.lab[c]).powi(2)).sum();
                    let ds = (x as f64 + 0.5 - ctr.x).powi(2) + (y as f64 + 0.5 - ctr.y).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // Pixels outside every search window go to the nearest centre.
        for i in 0..w * h {
            if dist[i].is_infinite() {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                labels[i] = centers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (a.1.x - x).powi(2) + (a.1.y - y).powi(2);
                        let db = (b.1.x - x).powi(2) + (b.1.y - y).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(k, _)| k as u32)
                    .unwrap_or(0);
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for i in 0..w * h {
            let a = &mut acc[labels[i] as usize];
            a[0] += lab[i][0];
            a[1] += lab[i][1];
            a[2] += lab[i][2];
            a[3] += (i % w) as f64 + 0.5;
            a[4] += (i / w) as f64 + 0.5;
            a[5] += 1.0;
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                ctr.lab = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                ctr.x = a[3] / a[5];
                ctr.y = a[4] / a[5];
            }
        }
    }
    labels
}

/// Relabels every 4-connected component as its own segment, folding
/// components smaller than `min_size` into an adjacent one. Ids come out
/// contiguous in scan order.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> (Vec<u32>, usize) {
    let mut out = vec![u32::MAX; w * h];
    let mut seen = vec![false; w * h];
    let mut next = 0u32;
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        let mut members = Vec::new();
        flood(labels, w, h, start, &mut seen, |i| members.push(i));
        // The neighbour already labelled (left or above the first pixel).
        let adjacent = {
            let (x, y) = (start % w, start / w);
            if x > 0 && out[start - 1] != u32::MAX {
                Some(out[start - 1])
            } else if y > 0 && out[start - w] != u32::MAX {
                Some(out[start - w])
            } else {
                None
            }
        };
        let id = match adjacent {
            Some(a) if members.len() < min_size => a,
            _ => {
                next += 1;
                next - 1
            }
        };
        for i in members {
            out[i] = id;
        }
    }
    (out, next as usize)
}

/// Merges the smallest segment into its most similar neighbour until at most
/// `max` remain. Merging adjacent segments keeps every segment connected.
fn merge_down(ids: &mut [u32], lab: &[[f64; 3]], w: usize, h: usize, mut count: usize, max: usize) -> usize {
    while count > max {
        let mut sizes = vec![0usize; count];
        let mut means = vec![[0.0f64; 3]; count];
        for (i, &s) in ids.iter().enumerate() {
            sizes[s as usize] += 1;
            for c in 0..3 {
                means[s as usize][c] += lab[i][c];
            }
        }
        for (m, &n) in means.iter_mut().zip(&sizes) {
            m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let small = (0..count).min_by_key(|&s| (sizes[s], s)).expect("count > 0") as u32;
        let mut best: Option<(f64, u32)> = None;
        for i in 0..w * h {
            if ids[i] != small {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                let n = ids[j];
                if n != small {
                    let d: f64 = (0..3).map(|c| (means[n as usize][c] - means[small as usize][c]).powi(2)).sum();
                    if best.is_none_or(|(bd, bn)| d < bd || (d == bd && n < bn)) {
                        best = Some((d, n));
                    }
                }
            }
        }
        let Some((_, into)) = best else { break };
        let last = (count - 1) as u32;
        for id in ids.iter_mut() {
            if *id == small {
                *id = into;
            }
        }
        // Keep ids contiguous by moving the last id into the freed slot.
        if small != last {
            for id in ids.iter_mut() {
                if *id == last {
                    *id = small;
                }
            }
        }
        count -= 1;
    }
    count
}

pub fn segment_superpixels(image: &RgbImage, params: &SuperpixelParams) -> Result<SuperpixelMap, ExplainError> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w * h < params.min_segments {
        return Err(ExplainError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            min_segments: params.min_segments,
        });
    }
    let lab: Vec<[f64; 3]> = image.pixels().map(|p| rgb_to_lab(p.0)).collect();
    let mut target = params.target_segments.clamp(params.min_segments, params.max_segments);
    for _ in 0..6 {
        let raw = kmeans(&lab, w, h, target, params);
        let min_size = (w * h / (4 * target)).max(1);
        let (mut ids, count) = enforce_connectivity(&raw, w, h, min_size);
        let count = merge_down(&mut ids, &lab, w, h, count, params.max_segments);
        if count >= params.min_segments {
            return Ok(SuperpixelMap {
                width: image.width(),
                height: image.height(),
                segment_ids: ids,
                num_segments: count,
            });
        }
        if target >= w * h {
            break;
        }
        target = (target * 3).div_ceil(2).max(target + 1).min(w * h);
    }
    Err(ExplainError::ImageTooSmall {
        width: image.width(),
        height: image.height(),
        min_segments: params.min_segments,
    })
}
