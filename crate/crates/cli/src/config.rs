//! `derma.toml`: one file with `[model]`, `[split]`, `[training]`,
//! `[explain]` and `[serve]` sections. Command-line flags override it.

use std::path::Path;

use anyhow::Context;
use derma_core::dataset::SplitRatios;
use derma_core::explain::LimeConfig;
use derma_core::train::TrainingConfig;
use derma_serve::ServiceConfig;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: String,
    pub input_size: Option<u32>,
    pub dense_units: Vec<usize>,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    /// Backbone layers to fine-tune along with the head (0 = frozen).
    pub unfreeze_last: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: "tiny-cnn".into(),
            input_size: None,
            dense_units: vec![128],
            dropout_rate: 0.3,
            batch_norm: true,
            unfreeze_last: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { seed: 42, ratios: SplitRatios::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct ExplainSection {
    pub method: String,
    pub gradcam_layer: Option<String>,
    pub lime: LimeConfig,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { method: "both".into(), gradcam_layer: None, lime: LimeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    #[serde(flatten)]
    pub service: ServiceConfig,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, service: ServiceConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub split: SplitSection,
    pub training: TrainingConfig,
    pub explain: ExplainSection,
    pub serve: ServeSection,
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.training.validate()?;
        cfg.split.ratios.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_default() {
        let cfg = Config::parse(
            r#"
            [model]
            unfreeze_last = 2
            [training]
            learning_rate = 0.001
            max_epochs = 5
            [explain]
            method = "lime"
            lime = { num_samples = 200, top_k = 3 }
            [serve]
            port = 9000
            upload_limit_bytes = 1024
            explain = { lime_samples = 50 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.unfreeze_last, 2);
        assert_eq!(cfg.model.backbone, "tiny-cnn");
        assert_eq!(cfg.training.max_epochs, 5);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.explain.lime.num_samples, 200);
        assert_eq!(cfg.explain.lime.kernel_width, 0.25);
        assert_eq!(cfg.serve.port, 9000);
        assert_eq!(cfg.serve.service.upload_limit_bytes, 1024);
        assert_eq!(cfg.serve.service.explain.lime_samples, 50);
        assert_eq!(cfg.split.seed, 42);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::parse("[trainin]\nx = 1").is_err());
        assert!(Config::parse("[training]\nbatch_size = 0").is_err());
        assert!(Config::parse("[split]\nratios = { train = 0.9, val = 0.2, test = 0.1 }").is_err());
    }
}
