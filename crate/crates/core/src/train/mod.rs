//! Training loop: categorical cross-entropy, Adam, and the early-stopping /
//! plateau / best-checkpoint callbacks, with a per-epoch history.

mod callbacks;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use callbacks::{EarlyStopping, ModelCheckpoint, Monitor, ReduceLrOnPlateau};

use crate::dataset::{load_image, preprocess_rgb, DatasetError, DatasetManifest, Split};
use crate::model::{
    save_checkpoint, softmax, Adam, AdamConfig, CheckpointMeta, ClassifierModel, ConvGrads, Gradients, ModelError,
};
use crate::seed::mix_seed;
use crate::tensor::FeatureMap;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(Split),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("divergence: non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate:e})")]
    Divergence {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("taxonomy mismatch: model classes {model:?} differ from manifest classes {manifest:?}")]
    TaxonomyMismatch { model: Vec<String>, manifest: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimisation hyperparameters. Keys match the config-file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_factor: f64,
    pub lr_reduce_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub monitor: Monitor,
    /// Random flips and quarter turns of training images. Off by default.
    pub augment: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 7,
            lr_reduce_factor: 0.5,
            lr_reduce_patience: 3,
            min_lr: 1e-6,
            seed: 42,
            monitor: Monitor::ValLoss,
            augment: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return bad(format!("lr_reduce_factor must be in (0, 1), got {}", self.lr_reduce_factor));
        }
        if !(self.min_lr > 0.0) {
            return bad(format!("min_lr must be positive, got {}", self.min_lr));
        }
        Ok(())
    }

    /// Parses flat `key = value` text.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_value: f64,
    pub monitor: Monitor,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

impl TrainingHistory {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.learning_rate
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_csv())
    }
}

/// Mean cross-entropy and top-1 accuracy of probability rows against labels.
/// Probabilities are floored at `1e-15` before the logarithm; argmax ties go
/// to the lowest index.
pub fn loss_and_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    assert_eq!(probs.len(), labels.len());
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &y) in probs.iter().zip(labels) {
        loss -= p[y].max(1e-15).ln();
        if argmax(p) == y {
            correct += 1;
        }
    }
    (loss / n, correct as f64 / n)
}

/// Cross-entropy of one logit row via log-sum-exp.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One split held in memory as activations entering the first trainable
/// layer. Those never change during training, so they are computed once.
pub struct SplitCache {
    prefixes: Vec<FeatureMap>,
    /// Resized source pixels, kept only when augmentation needs them.
    images: Option<Vec<RgbImage>>,
    labels: Vec<usize>,
}

impl SplitCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Decodes and preprocesses every image of `split` with the model's spec.
    pub fn load(model: &ClassifierModel, manifest: &DatasetManifest, split: Split, keep_images: bool) -> Result<Self, TrainError> {
        if model.taxonomy.classes() != manifest.taxonomy.classes() {
            return Err(TrainError::TaxonomyMismatch {
                model: model.taxonomy.classes().to_vec(),
                manifest: manifest.taxonomy.classes().to_vec(),
            });
        }
        let items = manifest.labeled(split);
        if items.is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
        let loaded: Vec<(FeatureMap, Option<RgbImage>)> = items
            .par_iter()
            .map(|(path, _)| -> Result<_, TrainError> {
                let rgb = resize_to(&load_image(path)?.to_rgb8(), model.preprocess.target_size);
                let x = preprocess_rgb(&rgb, &model.preprocess)?;
                Ok((model.frozen_prefix(&x)?, keep_images.then_some(rgb)))
            })
            .collect::<Result<_, _>>()?;
        let (prefixes, images): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        Ok(Self {
            prefixes,
            images: keep_images.then(|| images.into_iter().map(|i| i.expect("kept")).collect()),
            labels: items.iter().map(|(_, y)| *y).collect(),
        })
    }

    /// Builds a cache from in-memory preprocessed inputs.
    pub fn from_inputs(model: &ClassifierModel, inputs: &[FeatureMap], labels: &[usize]) -> Result<Self, TrainError> {
        if inputs.is_empty() {
            return Err(TrainError::EmptySplit(Split::Unassigned));
        }
        let prefixes = inputs
            .par_iter()
            .map(|x| model.frozen_prefix(x))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            prefixes,
            images: None,
            labels: labels.to_vec(),
        })
    }

    /// Evaluation-mode probability rows.
    pub fn predict(&self, model: &ClassifierModel) -> Vec<Vec<f64>> {
        self.prefixes
            .par_iter()
            .map(|p| softmax(&model.logits_from_prefix(p)))
            .collect()
    }
}

fn resize_to(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) || img.width() == 0 || img.height() == 0 {
        img.clone()
    } else {
        imageops::resize(img, size, size, imageops::FilterType::Triangle)
    }
}

fn augment(img: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = match rng.gen_range(0..4) {
        0 => img.clone(),
        1 => imageops::rotate90(img),
        2 => imageops::rotate180(img),
        _ => imageops::rotate270(img),
    };
    if rng.gen_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Mean loss and accuracy over a cached split in evaluation mode.
pub fn evaluate_epoch(model: &ClassifierModel, split: &SplitCache) -> Result<(f64, f64), TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit(Split::Unassigned));
    }
    Ok(loss_and_accuracy(&split.predict(model), &split.labels))
}

/// Loads `split` from disk and evaluates it.
pub fn evaluate_split(model: &ClassifierModel, manifest: &DatasetManifest, split: Split) -> Result<(f64, f64), TrainError> {
    let cache = SplitCache::load(model, manifest, split, false)?;
    evaluate_epoch(model, &cache)
}

/// Extra knobs that are not hyperparameters.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Written every time the monitored metric improves.
    pub checkpoint_path: Option<PathBuf>,
    /// Called after every epoch.
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub model: ClassifierModel,
    pub history: TrainingHistory,
}

/// Trains on the manifest's train split, monitoring its val split.
pub fn train(model: ClassifierModel, manifest: &DatasetManifest, config: &TrainingConfig) -> Result<TrainOutcome, TrainError> {
    train_with(model, manifest, config, TrainOptions::default())
}

pub fn train_with(
    model: ClassifierModel,
    manifest: &DatasetManifest,
    config: &TrainingConfig,
    options: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if manifest.split_len(Split::Train) == 0 {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if manifest.split_len(Split::Val) == 0 {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let train = SplitCache::load(&model, manifest, Split::Train, config.augment)?;
    let val = SplitCache::load(&model, manifest, Split::Val, false)?;
    train_cached(model, &train, &val, config, options)
}

/// Training loop over pre-built caches.
pub fn train_cached(
    mut model: ClassifierModel,
    train: &SplitCache,
    val: &SplitCache,
    config: &TrainingConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let mut adam = Adam::new(config.learning_rate, AdamConfig::default());
    let mut early = EarlyStopping::new(config.monitor, config.early_stop_patience);
    let mut plateau = ReduceLrOnPlateau::new(
        config.monitor,
        config.lr_reduce_factor,
        config.lr_reduce_patience,
        config.min_lr,
    );
    let mut best = ModelCheckpoint::new(config.monitor);
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let lr = adam.learning_rate;
        let (train_loss, train_accuracy) = run_epoch(&mut model, &mut adam, train, config, epoch)?;
        let (val_loss, val_accuracy) = evaluate_epoch(&model, val)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        };
        records.push(record);
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&record);
        }
        let value = match config.monitor {
            Monitor::ValLoss => val_loss,
            Monitor::ValAccuracy => val_accuracy,
        };
        if best.on_epoch_end(epoch, value, &model) {
            if let Some(path) = &options.checkpoint_path {
                let meta = CheckpointMeta {
                    epoch: Some(epoch),
                    monitor: Some(config.monitor.as_str().to_string()),
                    monitor_value: Some(value),
                };
                save_checkpoint(path, &model, &meta)?;
            }
        }
        adam.learning_rate = plateau.on_epoch_end(value, lr);
        if early.on_epoch_end(value) && epoch < config.max_epochs {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_value, best_model) = match best.into_best() {
        Some(b) => b,
        // Every epoch produced NaN validation loss: keep the final state.
        None => (records.len(), f64::NAN, model),
    };
    Ok(TrainOutcome {
        model: best_model,
        history: TrainingHistory {
            records,
            best_epoch,
            best_value,
            monitor: config.monitor,
            stopped_early,
        },
    })
}

/// One pass over the shuffled training split. Returns the sample-weighted
/// mean training-mode loss and accuracy.
fn run_epoch(
    model: &mut ClassifierModel,
    adam: &mut Adam,
    train: &SplitCache,
    config: &TrainingConfig,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let epoch_seed = mix_seed(config.seed, epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, 0xD50));

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let prefixes: Vec<FeatureMap> = match &train.images {
            Some(images) => batch
                .par_iter()
                .map(|&i| -> Result<FeatureMap, TrainError> {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, i as u64 + 1));
                    let img = augment(&images[i], &mut rng);
                    Ok(model.frozen_prefix(&preprocess_rgb(&img, &model.preprocess)?)?)
                })
                .collect::<Result<_, _>>()?,
            None => batch.iter().map(|&i| train.prefixes[i].clone()).collect(),
        };
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let passes: Vec<_> = prefixes.par_iter().map(|p| model.suffix_pass(p)).collect();
        let pooled: Vec<Vec<f64>> = passes.iter().map(|p| p.top().global_average_pool()).collect();

        let (logits, cache) = model.head.forward_train(&pooled, &mut dropout_rng);
        let n = batch.len() as f64;
        let mut batch_loss = 0.0;
        let mut dlogits = Vec::with_capacity(batch.len());
        for (l, &y) in logits.iter().zip(&labels) {
            batch_loss += cross_entropy(l, y);
            if argmax(l) == y {
                correct += 1;
            }
            let mut d = softmax(l);
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v /= n);
            dlogits.push(d);
        }
        if !batch_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: b + 1,
                learning_rate: adam.learning_rate,
            });
        }
        loss_sum += batch_loss;

        let (head_grads, dpooled) = model.head.backward(&cache, &dlogits);
        let per_sample: Vec<Vec<Option<ConvGrads>>> = passes
            .par_iter()
            .zip(&dpooled)
            .map(|(p, d)| model.backbone_backward(p, d))
            .collect();
        let mut backbone: Vec<Option<ConvGrads>> = vec![None; model.backbone.layers.len()];
        for sample in per_sample {
            for (acc, g) in backbone.iter_mut().zip(sample) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let grads = Gradients {
            backbone,
            head: head_grads,
        };
        if !grads.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: b + 1,
                learning_rate: adam.learning_rate,
            });
        }
        adam.step(model, &grads);
    }
    let n = train.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassTaxonomy;
    use crate::model::{BackboneSpec, HeadConfig, TrainableStage};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn model(k: usize, seed: u64) -> ClassifierModel {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let taxonomy = ClassTaxonomy::new(names).unwrap();
        let mut head = HeadConfig::new(k);
        head.dense_units = vec![32];
        ClassifierModel::build(&BackboneSpec::named("tiny-cnn").unwrap(), &head, &taxonomy, seed).unwrap()
    }

    /// Inputs whose mean colour depends on the label, plus noise.
    fn colour_inputs(n: usize, k: usize, seed: u64) -> (Vec<FeatureMap>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % k;
            let mut x = FeatureMap::zeros(224, 224, 3);
            for px in x.data.chunks_exact_mut(3) {
                for (c, v) in px.iter_mut().enumerate() {
                    *v = if c == y { 1.5 } else { -0.5 } + rng.gen_range(-0.5..0.5);
                }
            }
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn one_hot_and_uniform_reference_values() {
        let probs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_eq!(loss_and_accuracy(&probs, &[0, 2]), (0.0, 1.0));
        for k in 2..7 {
            let uniform = vec![vec![1.0 / k as f64; k]; 5];
            let (loss, _) = loss_and_accuracy(&uniform, &[0, 1, 0, 1, 0]);
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn loss_matches_direct_summation(rows in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 4), 0usize..4), 1..40)) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|(r, _)| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
            let (loss, acc) = loss_and_accuracy(&probs, &labels);
            let mut direct = 0.0;
            let mut hits = 0.0;
            for i in 0..probs.len() {
                direct += -probs[i][labels[i]].ln();
                let top = (0..4).fold(0, |b, k| if probs[i][k] > probs[i][b] { k } else { b });
                if top == labels[i] { hits += 1.0; }
            }
            prop_assert!((loss - direct / probs.len() as f64).abs() < 1e-9);
            prop_assert!((acc - hits / probs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn config_parses_flat_keys_and_validates() {
        let cfg = TrainingConfig::from_toml_str("learning_rate = 0.001\nbatch_size = 8\nmonitor = \"val_accuracy\"\n").unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.max_epochs, 50);
        assert_eq!(cfg.monitor, Monitor::ValAccuracy);
        assert!(TrainingConfig::from_toml_str("early_stop_patience = 0").is_err());
        assert!(TrainingConfig::from_toml_str("lr_reduce_factor = 1.5").is_err());
        assert!(TrainingConfig::from_toml_str("learnin_rate = 1").is_err());
    }

    #[test]
    fn frozen_training_moves_only_the_head_and_is_reproducible() {
        let (xs, ys) = colour_inputs(24, 3, 1);
        let m = model(3, 7);
        let checksum = m.backbone_checksum();
        let train = SplitCache::from_inputs(&m, &xs[..18], &ys[..18]).unwrap();
        let val = SplitCache::from_inputs(&m, &xs[18..], &ys[18..]).unwrap();
        let cfg = TrainingConfig {
            batch_size: 6,
            max_epochs: 4,
            learning_rate: 1e-3,
            ..TrainingConfig::default()
        };
        let a = train_cached(m.clone(), &train, &val, &cfg, TrainOptions::default()).unwrap();
        let b = train_cached(m.clone(), &train, &val, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.model.backbone_checksum(), checksum);
        assert_ne!(a.model.head, m.head);
        assert!(a.history.records.len() <= cfg.max_epochs);
        let best = a.history.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history.best_value, best);
        // The returned model is the best epoch's.
        let (vl, va) = evaluate_epoch(&a.model, &val).unwrap();
        assert_eq!((vl, va), (a.history.best_record().val_loss, a.history.best_record().val_accuracy));
    }

    #[test]
    fn partial_stage_changes_exactly_the_unfrozen_layers() {
        let (xs, ys) = colour_inputs(12, 2, 2);
        let mut m = model(2, 3);
        m.set_trainable_stage(TrainableStage::Partial { last_n: 2 }).unwrap();
        let before = m.layer_checksums();
        let train = SplitCache::from_inputs(&m, &xs[..8], &ys[..8]).unwrap();
        let val = SplitCache::from_inputs(&m, &xs[8..], &ys[8..]).unwrap();
        let cfg = TrainingConfig {
            batch_size: 4,
            max_epochs: 2,
            ..TrainingConfig::default()
        };
        let out = train_cached(m, &train, &val, &cfg, TrainOptions::default()).unwrap();
        let after = out.model.layer_checksums();
        let changed: Vec<&str> = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0.as_str())
            .collect();
        assert_eq!(changed, ["conv4", "conv5"]);
    }

    #[test]
    fn partial_backbone_gradient_matches_finite_differences() {
        let (xs, ys) = colour_inputs(3, 3, 5);
        let mut m = model(3, 11);
        m.head.bn = None;
        m.set_trainable_stage(TrainableStage::Partial { last_n: 1 }).unwrap();
        let loss = |m: &ClassifierModel| -> f64 {
            xs.iter()
                .zip(&ys)
                .map(|(x, &y)| cross_entropy(&m.logits(x).unwrap(), y))
                .sum::<f64>()
        };
        let prefixes: Vec<_> = xs.iter().map(|x| m.frozen_prefix(x).unwrap()).collect();
        let mut grad = ConvGrads::zeros_like(&m.backbone.layers[4]);
        for (p, &y) in prefixes.iter().zip(&ys) {
            let pass = m.suffix_pass(p);
            let pooled = pass.top().global_average_pool();
            let logits = m.head.logits(&pooled);
            let mut d = softmax(&logits);
            d[y] -= 1.0;
            // Eval-mode head without batch-norm: dL/dpooled through dense+ReLU.
            let mut dp = vec![0.0; pooled.len()];
            for (k, dk) in d.iter().enumerate() {
                for (i, v) in m.head.logit_input_grad(&pooled, k).iter().enumerate() {
                    dp[i] += dk * v;
                }
            }
            grad.add_assign(m.backbone_backward(&pass, &dp)[4].as_ref().unwrap());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ok = 0;
        for _ in 0..20 {
            let i = rng.gen_range(0..grad.weight.len());
            let eps = 1e-5;
            let mut p = m.clone();
            p.backbone.layers[4].weight[i] += eps;
            let mut q = m.clone();
            q.backbone.layers[4].weight[i] -= eps;
            let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
            if (fd - grad.weight[i]).abs() <= 1e-4 * fd.abs().max(grad.weight[i].abs()).max(1e-6) {
                ok += 1;
            }
        }
        assert!(ok >= 19, "{ok}/20");
    }

    #[test]
    fn divergence_reports_epoch_batch_and_rate() {
        let (xs, ys) = colour_inputs(8, 2, 3);
        let mut m = model(2, 1);
        m.head.output.weight.iter_mut().for_each(|w| *w = f64::NAN);
        let train = SplitCache::from_inputs(&m, &xs[..4], &ys[..4]).unwrap();
        let val = SplitCache::from_inputs(&m, &xs[4..], &ys[4..]).unwrap();
        let err = train_cached(m, &train, &val, &TrainingConfig::default(), TrainOptions::default())
            .err()
            .unwrap();
        assert!(matches!(err, TrainError::Divergence { epoch: 1, batch: 1, .. }));
        assert!(err.to_string().contains("divergence"));
    }

    #[test]
    fn taxonomy_mismatch_is_rejected_before_loading() {
        let m = model(2, 1);
        let other = ClassTaxonomy::new(["x", "y"]).unwrap();
        let manifest = DatasetManifest::new(other, Vec::new()).unwrap();
        let err = SplitCache::load(&m, &manifest, Split::Test, false).err().unwrap();
        assert!(err.to_string().starts_with("taxonomy mismatch"), "{err}");
    }

    #[test]
    fn history_csv_has_expected_header() {
        let h = TrainingHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_accuracy: 0.75,
                val_loss: 0.25,
                val_accuracy: 1.0,
                learning_rate: 1e-4,
            }],
            best_epoch: 1,
            best_value: 0.25,
            monitor: Monitor::ValLoss,
            stopped_early: false,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,train_acc,val_loss,val_acc,lr\n1,0.5,0.75,0.25,1,0.0001\n");
    }
}
