use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::FeatureMap;

/// Square convolution followed by ReLU, computed as im2col + GEMM.
///
/// `weight` is laid out `(kernel·kernel·in_channels) × out_channels`, rows
/// ordered by (ky, kx, c), matching the HWC layout of [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// What a training pass keeps to differentiate one conv layer.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    input_shape: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl ConvLayer {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn im2col(&self, x: &FeatureMap) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = self.output_size(x.height, x.width);
        let k = self.kernel;
        let c = self.in_channels;
        let row_len = self.patch_len();
        let mut cols = vec![0.0; oh * ow * row_len];
        let pad = self.padding as isize;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = x.index(iy as usize, ix as usize, 0);
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn gemm_forward(&self, cols: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.out_channels);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        let a = ArrayView2::from_shape((rows, self.patch_len()), cols).expect("im2col shape");
        let b = ArrayView2::from_shape((self.patch_len(), self.out_channels), &self.weight)
            .expect("weight shape");
        let mut c = ArrayViewMut2::from_shape((rows, self.out_channels), &mut out).expect("output shape");
        general_mat_mul(1.0, &a, &b, 1.0, &mut c);
        out
    }

    /// Forward pass (conv + ReLU).
    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "{}: channel mismatch", self.name);
        let (cols, oh, ow) = self.im2col(x);
        let mut out = self.gemm_forward(&cols, oh * ow);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        (
            FeatureMap::from_vec(oh, ow, self.out_channels, out),
            ConvCache {
                cols,
                input_shape: x.shape(),
            },
        )
    }

    /// Backpropagates `grad_out` (gradient w.r.t. this layer's post-ReLU
    /// output) and returns the parameter gradients plus, when requested, the
    /// gradient w.r.t. the layer input.
    pub fn backward(
        &self,
        cache: &ConvCache,
        output: &FeatureMap,
        grad_out: &FeatureMap,
        need_input_grad: bool,
        need_param_grad: bool,
    ) -> (Option<ConvGrads>, Option<FeatureMap>) {
        let rows = output.height * output.width;
        let oc = self.out_channels;
        let dz: Vec<f64> = grad_out
            .data
            .iter()
            .zip(&output.data)
            .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
            .collect();
        let dz_view = ArrayView2::from_shape((rows, oc), &dz).expect("grad shape");

        let params = need_param_grad.then(|| {
            let cols = ArrayView2::from_shape((rows, self.patch_len()), &cache.cols).expect("cols shape");
            let mut weight = vec![0.0; self.weight.len()];
            {
                let mut dw = ArrayViewMut2::from_shape((self.patch_len(), oc), &mut weight).expect("dw shape");
                general_mat_mul(1.0, &cols.t(), &dz_view, 0.0, &mut dw);
            }
            let mut bias = vec![0.0; oc];
            for row in dz.chunks_exact(oc) {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            ConvGrads { weight, bias }
        });

        let input = need_input_grad.then(|| {
            let w = ArrayView2::from_shape((self.patch_len(), oc), &self.weight).expect("weight shape");
            let mut dcols = vec![0.0; rows * self.patch_len()];
            {
                let mut dc = ArrayViewMut2::from_shape((rows, self.patch_len()), &mut dcols).expect("dcols shape");
                general_mat_mul(1.0, &dz_view, &w.t(), 0.0, &mut dc);
            }
            self.col2im(&dcols, cache.input_shape, output.height, output.width)
        });
        (params, input)
    }

    fn col2im(&self, dcols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (h, w, c) = shape;
        let mut dx = FeatureMap::zeros(h, w, c);
        let k = self.kernel;
        let row_len = self.patch_len();
        let pad = self.padding as isize;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &dcols[(oy * ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = dx.index(iy as usize, ix as usize, 0);
                        for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> ConvLayer {
        ConvLayer {
            name: "t".into(),
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
            weight: (0..9 * cin * cout).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            bias: (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(layer: &ConvLayer, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = layer.output_size(x.height, x.width);
        let mut out = FeatureMap::zeros(oh, ow, layer.out_channels);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..layer.out_channels {
                    let mut acc = layer.bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * layer.stride + ky) as isize - 1;
                            let ix = (ox * layer.stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                continue;
                            }
                            for c in 0..layer.in_channels {
                                let wi = ((ky * 3 + kx) * layer.in_channels + c) * layer.out_channels + o;
                                acc += layer.weight[wi] * x.get(iy as usize, ix as usize, c);
                            }
                        }
                    }
                    out.set(oy, ox, o, acc.max(0.0));
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let layer = random_layer(&mut rng, 3, 5, stride);
            let x = FeatureMap::from_vec(9, 7, 3, (0..9 * 7 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let fast = layer.forward(&x);
            let slow = naive_conv(&layer, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_224_down_to_7() {
        let layer = ConvLayer {
            name: "s".into(),
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
            weight: vec![0.0; 9],
            bias: vec![0.0],
        };
        let mut s = (224, 224);
        for _ in 0..5 {
            s = layer.output_size(s.0, s.1);
        }
        assert_eq!(s, (7, 7));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, 2, 3, 2);
        let x = FeatureMap::from_vec(6, 5, 2, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let upstream: Vec<f64> = {
            let (oh, ow) = layer.output_size(6, 5);
            (0..oh * ow * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let objective = |l: &ConvLayer, x: &FeatureMap| -> f64 {
            l.forward(x).data.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let (out, cache) = layer.forward_cached(&x);
        let g = FeatureMap::from_vec(out.height, out.width, out.channels, upstream.clone());
        let (pg, ig) = layer.backward(&cache, &out, &g, true, true);
        let (pg, ig) = (pg.unwrap(), ig.unwrap());
        let eps = 1e-6;
        for i in (0..layer.weight.len()).step_by(5) {
            let mut p = layer.clone();
            p.weight[i] += eps;
            let mut m = layer.clone();
            m.weight[i] -= eps;
            let fd = (objective(&p, &x) - objective(&m, &x)) / (2.0 * eps);
            assert!((fd - pg.weight[i]).abs() < 1e-6, "weight {i}: {fd} vs {}", pg.weight[i]);
        }
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * eps);
            assert!((fd - ig.data[i]).abs() < 1e-6, "input {i}: {fd} vs {}", ig.data[i]);
        }
    }
}
