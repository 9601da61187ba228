//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DERMACKP`, a little-endian `u32` schema version,
//! a little-endian `u64` header length, the JSON header, every tensor as
//! little-endian `f64` in header order, then a SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::BackboneSpec;
use super::classifier::{ClassifierModel, TrainableStage};
use super::head::HeadConfig;
use super::ModelError;
use crate::dataset::{ClassTaxonomy, PreprocessSpec};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DERMACKP";
const DIGEST_LEN: usize = 32;

/// Training bookkeeping stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub monitor: Option<String>,
    pub monitor_value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    backbone: BackboneSpec,
    head: HeadConfig,
    taxonomy: ClassTaxonomy,
    preprocess: PreprocessSpec,
    stage: TrainableStage,
    init_seed: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: ClassifierModel,
    pub meta: CheckpointMeta,
    /// Hex prefix of the file digest; changes whenever any byte changes.
    pub model_id: String,
}

fn tensors(model: &ClassifierModel) -> Vec<(String, &Vec<f64>)> {
    let mut out = Vec::new();
    for l in &model.backbone.layers {
        out.push((format!("{}.weight", l.name), &l.weight));
        out.push((format!("{}.bias", l.name), &l.bias));
    }
    for (i, d) in model.head.dense.iter().enumerate() {
        out.push((format!("dense{}.weight", i + 1), &d.weight));
        out.push((format!("dense{}.bias", i + 1), &d.bias));
    }
    if let Some(bn) = &model.head.bn {
        out.push(("batch_norm.gamma".into(), &bn.gamma));
        out.push(("batch_norm.beta".into(), &bn.beta));
        out.push(("batch_norm.running_mean".into(), &bn.running_mean));
        out.push(("batch_norm.running_var".into(), &bn.running_var));
    }
    out.push(("output.weight".into(), &model.head.output.weight));
    out.push(("output.bias".into(), &model.head.output.bias));
    out
}

fn tensors_mut(model: &mut ClassifierModel) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = Vec::new();
    for l in &mut model.backbone.layers {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
    for d in &mut model.head.dense {
        out.push(&mut d.weight);
        out.push(&mut d.bias);
    }
    if let Some(bn) = &mut model.head.bn {
        out.push(&mut bn.gamma);
        out.push(&mut bn.beta);
        out.push(&mut bn.running_mean);
        out.push(&mut bn.running_var);
    }
    out.push(&mut model.head.output.weight);
    out.push(&mut model.head.output.bias);
    out
}

/// Serializes a model to bytes.
pub fn encode_checkpoint(model: &ClassifierModel, meta: &CheckpointMeta) -> Result<Vec<u8>, ModelError> {
    let named = tensors(model);
    let header = Header {
        backbone: model.backbone.spec.clone(),
        head: model.head.config.clone(),
        taxonomy: model.taxonomy.clone(),
        preprocess: model.preprocess,
        stage: model.stage,
        init_seed: model.init_seed,
        meta: meta.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let payload_len: usize = named.iter().map(|(_, t)| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(20 + json.len() + payload_len + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Ok(bytes)
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint, ModelError> {
    let corrupt = |m: &str| ModelError::Corrupt(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::SchemaVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20usize.saturating_add(header_len))
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;

    let mut model = ClassifierModel::build(&header.backbone, &header.head, &header.taxonomy, header.init_seed)?;
    model.preprocess = header.preprocess;
    model.set_trainable_stage(header.stage)?;
    let expected = tensors(&model);
    if expected.len() != header.tensors.len() {
        return Err(corrupt("tensor count does not match the architecture"));
    }
    for ((name, t), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || t.len() != entry.len {
            return Err(ModelError::Corrupt(format!(
                "tensor {} ({} values) does not match {} ({} values)",
                entry.name,
                entry.len,
                name,
                t.len()
            )));
        }
    }
    let mut payload = &body[20 + header_len..];
    let total: usize = header.tensors.iter().map(|e| e.len * 8).sum();
    if payload.len() != total {
        return Err(corrupt("payload length does not match the header"));
    }
    for t in tensors_mut(&mut model) {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(payload[..8].try_into().expect("8 bytes"));
            payload = &payload[8..];
        }
    }
    Ok(LoadedCheckpoint {
        model,
        meta: header.meta,
        model_id: hex::encode(&digest[..6]),
    })
}

pub fn save_checkpoint(path: &Path, model: &ClassifierModel, meta: &CheckpointMeta) -> Result<String, ModelError> {
    let bytes = encode_checkpoint(model, meta)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, &bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..][..6]))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ClassifierModel {
        let taxonomy = ClassTaxonomy::new(["x", "y", "z"]).unwrap();
        let mut m =
            ClassifierModel::build(&BackboneSpec::named("tiny-cnn").unwrap(), &HeadConfig::new(3), &taxonomy, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bn = m.head.bn.as_mut().unwrap();
        bn.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        bn.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        m.backbone.layers[4].weight[7] += 0.25;
        m.set_trainable_stage(TrainableStage::Partial { last_n: 1 }).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let meta = CheckpointMeta {
            epoch: Some(4),
            monitor: Some("val_loss".into()),
            monitor_value: Some(0.125),
        };
        let id = save_checkpoint(&path, &m, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, m);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.model_id, id);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = FeatureMap::from_vec(224, 224, 3, (0..224 * 224 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let a = m.predict_probs(std::slice::from_ref(&x)).unwrap();
        let b = loaded.model.predict_probs(&[x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_tampering_are_detected() {
        let bytes = encode_checkpoint(&model(), &CheckpointMeta::default()).unwrap();
        for cut in [0, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("corrupt artifact"), "{cut}: {err}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn future_version_is_named() {
        let mut bytes = encode_checkpoint(&model(), &CheckpointMeta::default()).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, ModelError::SchemaVersion { found: 2, expected: 1 }));
        assert!(err.to_string().contains("schema version"));
    }
}
