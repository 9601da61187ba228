use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{Backbone, BackboneSpec};
use super::conv::{ConvCache, ConvGrads};
use super::head::{Head, HeadConfig, HeadGrads};
use super::ModelError;
use crate::dataset::{preprocess_image, ClassTaxonomy, PreprocessSpec};
use crate::tensor::FeatureMap;

/// Which parameters an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainableStage {
    /// Head only; the backbone stays bit-identical.
    Frozen,
    /// Head plus the last `last_n` backbone layers.
    Partial { last_n: usize },
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Gradients for every parameter tensor; `None` for backbone layers that were
/// not differentiated.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub backbone: Vec<Option<ConvGrads>>,
    pub head: HeadGrads,
}

impl Gradients {
    /// Zero gradients for the head and for every trainable backbone layer.
    pub fn zeros(model: &ClassifierModel) -> Self {
        let first = model.first_trainable_layer();
        let zeros = |d: &super::head::Dense| super::head::DenseGrads {
            weight: vec![0.0; d.weight.len()],
            bias: vec![0.0; d.bias.len()],
        };
        Self {
            backbone: model
                .backbone
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| (i >= first).then(|| ConvGrads::zeros_like(l)))
                .collect(),
            head: HeadGrads {
                dense: model.head.dense.iter().map(zeros).collect(),
                bn: model
                    .head
                    .bn
                    .as_ref()
                    .map(|b| (vec![0.0; b.gamma.len()], vec![0.0; b.beta.len()])),
                output: zeros(&model.head.output),
            },
        }
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        let mut all: Vec<&mut Vec<f64>> = Vec::new();
        for g in self.backbone.iter_mut().flatten() {
            all.push(&mut g.weight);
            all.push(&mut g.bias);
        }
        for d in &mut self.head.dense {
            all.push(&mut d.weight);
            all.push(&mut d.bias);
        }
        if let Some((a, b)) = &mut self.head.bn {
            all.push(a);
            all.push(b);
        }
        all.push(&mut self.head.output.weight);
        all.push(&mut self.head.output.bias);
        for v in all {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        let head = self
            .head
            .dense
            .iter()
            .chain(std::iter::once(&self.head.output))
            .all(|d| d.weight.iter().chain(&d.bias).all(|v| v.is_finite()));
        let bn = self
            .head
            .bn
            .as_ref()
            .is_none_or(|(a, b)| a.iter().chain(b).all(|v| v.is_finite()));
        let bb = self
            .backbone
            .iter()
            .flatten()
            .all(|g| g.weight.iter().chain(&g.bias).all(|v| v.is_finite()));
        head && bn && bb
    }
}

/// A backbone plus classification head, together with everything needed to
/// serve it: the ordered class list and the input preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub backbone: Backbone,
    pub head: Head,
    pub stage: TrainableStage,
    pub taxonomy: ClassTaxonomy,
    pub preprocess: PreprocessSpec,
    pub init_seed: u64,
}

/// Per-sample cache of a backbone pass over the trainable suffix.
pub(crate) struct BackbonePass {
    pub inputs: Vec<FeatureMap>,
    pub caches: Vec<ConvCache>,
    pub outputs: Vec<FeatureMap>,
    pub first: usize,
}

impl ClassifierModel {
    /// Builds a classifier in the frozen stage. The head is initialised from
    /// `seed`; the backbone uses its registry weights.
    pub fn build(
        backbone: &BackboneSpec,
        head: &HeadConfig,
        taxonomy: &ClassTaxonomy,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if head.num_classes != taxonomy.len() {
            return Err(ModelError::ClassCountMismatch {
                head: head.num_classes,
                taxonomy: taxonomy.len(),
            });
        }
        let bb = Backbone::build(backbone, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Head::init(head, bb.output_channels(), &mut rng)?;
        Ok(Self {
            preprocess: PreprocessSpec::imagenet(backbone.input_size),
            backbone: bb,
            head,
            stage: TrainableStage::Frozen,
            taxonomy: taxonomy.clone(),
            init_seed: seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn input_size(&self) -> usize {
        self.backbone.spec.input_size as usize
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.backbone.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Sets the stage and returns the resulting trainable-parameter count.
    pub fn set_trainable_stage(&mut self, stage: TrainableStage) -> Result<usize, ModelError> {
        if let TrainableStage::Partial { last_n } = stage {
            if last_n > self.backbone.layers.len() {
                return Err(ModelError::TooManyLayers {
                    requested: last_n,
                    available: self.backbone.layers.len(),
                });
            }
        }
        self.stage = stage;
        Ok(self.trainable_parameter_count())
    }

    /// Index of the first trainable backbone layer (== layer count when frozen).
    pub fn first_trainable_layer(&self) -> usize {
        let n = self.backbone.layers.len();
        match self.stage {
            TrainableStage::Frozen => n,
            TrainableStage::Partial { last_n } => n - last_n,
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.head.parameter_count()
            + self.backbone.layers[self.first_trainable_layer()..]
                .iter()
                .map(|l| l.parameter_count())
                .sum::<usize>()
    }

    /// SHA-256 over every backbone weight and bias, in layer order.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.backbone.layers {
            hash_layer(&mut h, &l.name, &l.weight, &l.bias);
        }
        hex::encode(h.finalize())
    }

    pub fn layer_checksums(&self) -> Vec<(String, String)> {
        self.backbone
            .layers
            .iter()
            .map(|l| {
                let mut h = Sha256::new();
                hash_layer(&mut h, &l.name, &l.weight, &l.bias);
                (l.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }

    fn check_input(&self, x: &FeatureMap) -> Result<(), ModelError> {
        let s = self.input_size();
        if x.shape() != (s, s, 3) {
            return Err(ModelError::ShapeMismatch {
                expected: (s, s, 3),
                found: x.shape(),
            });
        }
        Ok(())
    }

    /// GAP of the backbone's final feature map.
    pub fn pooled_features(&self, x: &FeatureMap) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.backbone.forward(x).global_average_pool())
    }

    /// Evaluation-mode pre-softmax class scores.
    pub fn logits(&self, x: &FeatureMap) -> Result<Vec<f64>, ModelError> {
        Ok(self.head.logits(&self.pooled_features(x)?))
    }

    /// Evaluation-mode class probabilities, one row per batch element.
    pub fn predict_probs(&self, batch: &[FeatureMap]) -> Result<Vec<Vec<f64>>, ModelError> {
        batch
            .par_iter()
            .map(|x| self.logits(x).map(|l| softmax(&l)))
            .collect()
    }

    /// Preprocesses a decoded image with the model's own spec, then predicts.
    pub fn predict_image(&self, image: &DynamicImage) -> Result<Vec<f64>, ModelError> {
        let x = preprocess_image(image, &self.preprocess)?;
        Ok(softmax(&self.logits(&x)?))
    }

    /// Logits computed from a given activation at the output of `layer`,
    /// continuing through the remaining backbone layers and the head.
    pub fn logits_from_layer(&self, layer: &str, activation: &FeatureMap) -> Result<Vec<f64>, ModelError> {
        let idx = self.spatial_layer_index(layer)?;
        let top = self
            .backbone
            .forward_range(activation, idx + 1, self.backbone.layers.len());
        Ok(self.head.logits(&top.global_average_pool()))
    }

    fn spatial_layer_index(&self, layer: &str) -> Result<usize, ModelError> {
        match layer {
            "gap" | "dense" | "dense1" | "dense2" | "batch_norm" | "dropout" | "logits" | "softmax" => {
                Err(ModelError::NonSpatialLayer(layer.to_string()))
            }
            _ => self.backbone.layer_index(layer),
        }
    }

    /// Activation `A` at `layer` (post-ReLU) and `∂logit[target] / ∂A`, both
    /// `H' × W' × C`, in evaluation mode.
    pub fn activations_and_gradients(
        &self,
        x: &FeatureMap,
        target_class: usize,
        layer: &str,
    ) -> Result<(FeatureMap, FeatureMap), ModelError> {
        self.check_input(x)?;
        if target_class >= self.num_classes() {
            return Err(ModelError::ClassOutOfRange {
                class: target_class,
                classes: self.num_classes(),
            });
        }
        let idx = self.spatial_layer_index(layer)?;
        let activation = self.backbone.forward_range(x, 0, idx + 1);

        let n = self.backbone.layers.len();
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        let mut cur = activation.clone();
        for l in &self.backbone.layers[idx + 1..n] {
            let (o, c) = l.forward_cached(&cur);
            caches.push(c);
            outs.push(o.clone());
            cur = o;
        }
        let pooled = cur.global_average_pool();
        let dpooled = self.head.logit_input_grad(&pooled, target_class);
        let mut grad = gap_backward(&dpooled, cur.height, cur.width);
        for (k, l) in self.backbone.layers[idx + 1..n].iter().enumerate().rev() {
            let (_, gi) = l.backward(&caches[k], &outs[k], &grad, true, false);
            grad = gi.expect("input gradient requested");
        }
        Ok((activation, grad))
    }

    /// Calls `f(slot, parameter, gradient)` for every trainable tensor that has
    /// a gradient. Slots are stable identifiers for optimizer state.
    pub(crate) fn visit_trainable(&mut self, grads: &Gradients, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        let mut slot = 0;
        for (d, g) in self.head.dense.iter_mut().zip(&grads.head.dense) {
            f(slot, &mut d.weight, &g.weight);
            f(slot + 1, &mut d.bias, &g.bias);
            slot += 2;
        }
        if let (Some(bn), Some((dgamma, dbeta))) = (self.head.bn.as_mut(), grads.head.bn.as_ref()) {
            f(10, &mut bn.gamma, dgamma);
            f(11, &mut bn.beta, dbeta);
        }
        f(12, &mut self.head.output.weight, &grads.head.output.weight);
        f(13, &mut self.head.output.bias, &grads.head.output.bias);
        let first = self.first_trainable_layer();
        for (li, layer) in self.backbone.layers.iter_mut().enumerate().skip(first) {
            if let Some(Some(g)) = grads.backbone.get(li) {
                f(100 + 2 * li, &mut layer.weight, &g.weight);
                f(101 + 2 * li, &mut layer.bias, &g.bias);
            }
        }
    }

    /// Activation entering the first trainable layer (the part of the forward
    /// pass that no optimizer step can change).
    pub(crate) fn frozen_prefix(&self, x: &FeatureMap) -> Result<FeatureMap, ModelError> {
        self.check_input(x)?;
        Ok(self.backbone.forward_range(x, 0, self.first_trainable_layer()))
    }

    /// Forward through the trainable backbone layers, starting from
    /// [`Self::frozen_prefix`], keeping what backpropagation needs.
    pub(crate) fn suffix_pass(&self, prefix: &FeatureMap) -> BackbonePass {
        let first = self.first_trainable_layer();
        let mut cur = prefix.clone();
        let mut pass = BackbonePass {
            inputs: Vec::new(),
            caches: Vec::new(),
            outputs: Vec::new(),
            first,
        };
        for l in &self.backbone.layers[first..] {
            let (o, c) = l.forward_cached(&cur);
            pass.inputs.push(cur);
            pass.caches.push(c);
            pass.outputs.push(o.clone());
            cur = o;
        }
        pass.inputs.push(cur);
        pass
    }

    /// Evaluation-mode logits from a frozen-prefix activation.
    pub(crate) fn logits_from_prefix(&self, prefix: &FeatureMap) -> Vec<f64> {
        let top = self
            .backbone
            .forward_range(prefix, self.first_trainable_layer(), self.backbone.layers.len());
        self.head.logits(&top.global_average_pool())
    }

    /// Backbone parameter gradients for one sample given dL/d(pooled).
    pub(crate) fn backbone_backward(&self, pass: &BackbonePass, dpooled: &[f64]) -> Vec<Option<ConvGrads>> {
        let mut grads: Vec<Option<ConvGrads>> = vec![None; self.backbone.layers.len()];
        let Some(last) = pass.outputs.last() else {
            return grads;
        };
        let mut grad = gap_backward(dpooled, last.height, last.width);
        for k in (0..pass.outputs.len()).rev() {
            let li = pass.first + k;
            let need_input = k > 0;
            let (pg, gi) = self.backbone.layers[li].backward(&pass.caches[k], &pass.outputs[k], &grad, need_input, true);
            grads[li] = pg;
            if let Some(gi) = gi {
                grad = gi;
            }
        }
        grads
    }
}

impl BackbonePass {
    pub fn top(&self) -> &FeatureMap {
        self.inputs.last().expect("pass always holds the final activation")
    }
}

fn gap_backward(dpooled: &[f64], h: usize, w: usize) -> FeatureMap {
    let c = dpooled.len();
    let scale = 1.0 / (h * w) as f64;
    let mut g = FeatureMap::zeros(h, w, c);
    for px in g.data.chunks_exact_mut(c) {
        for (v, d) in px.iter_mut().zip(dpooled) {
            *v = d * scale;
        }
    }
    g
}

fn hash_layer(h: &mut Sha256, name: &str, weight: &[f64], bias: &[f64]) {
    h.update(name.as_bytes());
    for v in weight.iter().chain(bias) {
        h.update(v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn small_model(k: usize, seed: u64) -> ClassifierModel {
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        let taxonomy = ClassTaxonomy::new(names).unwrap();
        let mut head = HeadConfig::new(k);
        head.dense_units = vec![16];
        ClassifierModel::build(&BackboneSpec::named("tiny-cnn").unwrap(), &head, &taxonomy, seed).unwrap()
    }

    fn random_input(rng: &mut ChaCha8Rng, size: usize) -> FeatureMap {
        FeatureMap::from_vec(size, size, 3, (0..size * size * 3).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn twenty_class_rows_sum_to_one() {
        let taxonomy = ClassTaxonomy::arsenicosis_default();
        let m = ClassifierModel::build(
            &BackboneSpec::named("tiny-cnn").unwrap(),
            &HeadConfig::new(20),
            &taxonomy,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<_> = (0..3).map(|_| random_input(&mut rng, 224)).collect();
        let probs = m.predict_probs(&batch).unwrap();
        assert_eq!(probs.len(), 3);
        for row in probs {
            assert_eq!(row.len(), 20);
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn build_errors() {
        let taxonomy = ClassTaxonomy::new(["a", "b", "c"]).unwrap();
        let bb = BackboneSpec::named("tiny-cnn").unwrap();
        assert!(matches!(
            ClassifierModel::build(&bb, &HeadConfig::new(20), &taxonomy, 0),
            Err(ModelError::ClassCountMismatch { head: 20, taxonomy: 3 })
        ));
        let unknown = BackboneSpec { name: "nope".into(), ..bb };
        assert!(matches!(
            ClassifierModel::build(&unknown, &HeadConfig::new(3), &taxonomy, 0),
            Err(ModelError::UnknownBackbone(_))
        ));
    }

    #[test]
    fn identical_seeds_give_identical_heads() {
        assert_eq!(small_model(3, 9).head, small_model(3, 9).head);
        assert_ne!(small_model(3, 9).head, small_model(3, 10).head);
    }

    #[test]
    fn stage_changes_trainable_count() {
        let mut m = small_model(3, 0);
        let frozen = m.trainable_parameter_count();
        let partial = m.set_trainable_stage(TrainableStage::Partial { last_n: 2 }).unwrap();
        assert!(partial > frozen);
        assert!(matches!(
            m.set_trainable_stage(TrainableStage::Partial { last_n: 6 }),
            Err(ModelError::TooManyLayers { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn predictions_are_deterministic_and_per_sample() {
        let m = small_model(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, 224);
        let a = m.predict_probs(&[x.clone(), x.clone(), x.clone()]).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        assert_eq!(m.predict_probs(&[x]).unwrap()[0], a[0]);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = small_model(3, 0);
        assert!(matches!(
            m.predict_probs(&[FeatureMap::zeros(100, 100, 3)]),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn severed_class_has_zero_gradient() {
        let mut m = small_model(3, 4);
        for i in 0..m.head.output.inputs {
            m.head.output.weight[i * 3 + 1] = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(&mut rng, 224);
        let (a, g) = m.activations_and_gradients(&x, 1, "conv5").unwrap();
        assert_eq!((a.height, a.width, a.channels), (7, 7, 128));
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_and_non_spatial_layers() {
        let m = small_model(3, 0);
        let x = FeatureMap::zeros(224, 224, 3);
        assert!(matches!(m.activations_and_gradients(&x, 0, "conv9"), Err(ModelError::LayerNotFound(_))));
        assert!(matches!(m.activations_and_gradients(&x, 0, "gap"), Err(ModelError::NonSpatialLayer(_))));
    }

    #[test]
    fn activation_gradient_matches_central_differences() {
        let m = small_model(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_input(&mut rng, 224);
        for layer in ["conv5", "conv4"] {
            let (a, g) = m.activations_and_gradients(&x, 2, layer).unwrap();
            let mut agree = 0;
            let samples = 60;
            for _ in 0..samples {
                let i = rng.gen_range(0..a.data.len());
                let eps = 1e-3;
                let mut ap = a.clone();
                ap.data[i] += eps;
                let mut am = a.clone();
                am.data[i] -= eps;
                let fd = (m.logits_from_layer(layer, &ap).unwrap()[2] - m.logits_from_layer(layer, &am).unwrap()[2])
                    / (2.0 * eps);
                let tol = 1e-2 * fd.abs().max(g.data[i].abs()).max(1e-9);
                if (fd - g.data[i]).abs() <= tol {
                    agree += 1;
                }
            }
            assert!(agree * 100 >= samples * 95, "{layer}: {agree}/{samples}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn permuting_output_units_permutes_probabilities(seed in 0u64..1000, rot in 1usize..4) {
            let m = small_model(4, seed);
            let perm: Vec<usize> = (0..4).map(|k| (k + rot) % 4).collect();
            let mut p = m.clone();
            for i in 0..m.head.output.inputs {
                for (k, &src) in perm.iter().enumerate() {
                    p.head.output.weight[i * 4 + k] = m.head.output.weight[i * 4 + src];
                }
            }
            for (k, &src) in perm.iter().enumerate() {
                p.head.output.bias[k] = m.head.output.bias[src];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_input(&mut rng, 224);
            let a = m.predict_probs(std::slice::from_ref(&x)).unwrap().remove(0);
            let b = p.predict_probs(&[x]).unwrap().remove(0);
            for (k, &src) in perm.iter().enumerate() {
                prop_assert!((b[k] - a[src]).abs() < 1e-12);
            }
        }
    }
}
