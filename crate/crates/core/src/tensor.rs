use serde::{Deserialize, Serialize};

/// Dense `height × width × channels` array stored row-major with channels
/// innermost (HWC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            height * width * channels,
            "feature map data does not match its shape"
        );
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Global average pooling: the per-channel mean over all spatial positions.
    pub fn global_average_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (self.height * self.width) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_is_per_channel_spatial_mean() {
        let (h, w, c) = (7, 7, 512);
        let data: Vec<f64> = (0..h * w * c).map(|i| ((i * 37) % 101) as f64 * 0.5).collect();
        let fm = FeatureMap::from_vec(h, w, c, data);
        let pooled = fm.global_average_pool();
        assert_eq!(pooled.len(), 512);
        for ch in [0, 1, 255, 511] {
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sum += fm.get(y, x, ch);
                }
            }
            assert!((pooled[ch] - sum / 49.0).abs() < 1e-12);
        }
    }
}
