//! HTTP inference service for a trained classifier checkpoint.
//!
//! `GET /health`, `GET /classes`, `POST /predict` (multipart field `image`,
//! query `top_k`, `explain=none|lime|gradcam|both`) and a small HTML page at
//! `GET /`.

mod error;
mod page;

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use derma_core::dataset::{quality_gate, QualityReport, QualityThresholds};
use derma_core::explain::{
    gradcam_explain, lime_explain, render_gradcam, render_lime, Baseline, LimeConfig, SuperpixelParams,
};
use derma_core::model::{load_checkpoint, ClassifierModel, ModelError};
use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

pub use error::ApiError;

pub const DEFAULT_UPLOAD_LIMIT: usize = 10 * 1024 * 1024;

/// Caps on the work a single explanation request may do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainBudget {
    pub lime_samples: usize,
    pub lime_segments: usize,
    /// Explanations computed at the same time; further requests wait.
    pub max_concurrent: usize,
    /// Grad-CAM layer; the backbone's feature layer when unset.
    pub gradcam_layer: Option<String>,
}

impl Default for ExplainBudget {
    fn default() -> Self {
        Self {
            lime_samples: 300,
            lime_segments: 40,
            max_concurrent: 1,
            gradcam_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub upload_limit_bytes: usize,
    pub explain: ExplainBudget,
    /// Seed for every LIME run, so identical requests give identical overlays.
    pub explain_seed: u64,
    pub quality: QualityThresholds,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            upload_limit_bytes: DEFAULT_UPLOAD_LIMIT,
            explain: ExplainBudget::default(),
            explain_seed: 0,
            quality: QualityThresholds::default(),
        }
    }
}

impl ServiceConfig {
    fn lime_config(&self) -> LimeConfig {
        let segments = self.explain.lime_segments.max(2);
        LimeConfig {
            num_samples: self.explain.lime_samples.max(segments * 2),
            seed: self.explain_seed,
            baseline: Baseline::SegmentMean,
            superpixels: SuperpixelParams {
                target_segments: segments,
                min_segments: (segments / 4).max(2),
                max_segments: segments * 2,
                ..SuperpixelParams::default()
            },
            ..LimeConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot load artifact {path}: {source}")]
    Artifact { path: String, source: ModelError },
    #[error("model already loaded")]
    AlreadyLoaded,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model loader failed: {0}")]
    Loader(String),
}

pub struct LoadedModel {
    pub model: ClassifierModel,
    pub model_id: String,
}

/// Reads and verifies a checkpoint.
pub fn load_artifact(path: &Path) -> Result<LoadedModel, ServeError> {
    let loaded = load_checkpoint(path).map_err(|source| ServeError::Artifact {
        path: path.display().to_string(),
        source,
    })?;
    Ok(LoadedModel { model: loaded.model, model_id: loaded.model_id })
}

struct Inner {
    config: ServiceConfig,
    model: OnceLock<Arc<LoadedModel>>,
    started: Instant,
    explain_permits: Arc<Semaphore>,
}

/// Shared, read-only service state. The model is installed once.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn loading(config: ServiceConfig) -> Self {
        let permits = config.explain.max_concurrent.max(1);
        Self {
            inner: Arc::new(Inner {
                config,
                model: OnceLock::new(),
                started: Instant::now(),
                explain_permits: Arc::new(Semaphore::new(permits)),
            }),
        }
    }

    pub fn ready(config: ServiceConfig, model: LoadedModel) -> Self {
        let state = Self::loading(config);
        state.install(model).expect("fresh state has no model");
        state
    }

    pub fn install(&self, model: LoadedModel) -> Result<(), ServeError> {
        self.inner.model.set(Arc::new(model)).map_err(|_| ServeError::AlreadyLoaded)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.inner.model.get().cloned().ok_or_else(ApiError::not_ready)
    }
}

pub fn router(state: AppState) -> Router {
    // Room for multipart framing around an image at the limit.
    let body_limit = state.config().upload_limit_bytes + 64 * 1024;
    Router::new()
        .route("/", get(page::index))
        .route("/ui/predict", post(page::predict_page))
        .route("/health", get(health))
        .route("/classes", get(classes))
        .route("/predict", post(predict))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: Option<String>,
    pub uptime_s: f64,
    pub num_classes: Option<usize>,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let model = state.inner.model.get();
    Json(Health {
        status: if model.is_some() { "ok" } else { "loading" }.to_string(),
        model_id: model.map(|m| m.model_id.clone()),
        uptime_s: state.inner.started.elapsed().as_secs_f64(),
        num_classes: model.map(|m| m.model.num_classes()),
    })
}

async fn classes(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let m = state.model()?;
    Ok(Json(serde_json::json!({ "classes": m.model.taxonomy.classes() })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMode {
    #[default]
    None,
    Lime,
    Gradcam,
    Both,
}

impl ExplainMode {
    fn lime(self) -> bool {
        matches!(self, Self::Lime | Self::Both)
    }

    fn gradcam(self) -> bool {
        matches!(self, Self::Gradcam | Self::Both)
    }
}

#[derive(Debug, Deserialize)]
pub struct PredictParams {
    pub top_k: Option<usize>,
    #[serde(default)]
    pub explain: ExplainMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub class_index: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainBundle {
    /// Base64 PNG overlays at the upload's resolution.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lime: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam: Option<String>,
    pub target_class: usize,
    pub target_label: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lime_surrogate_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lime_segments: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcam_layer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub predictions: Vec<ScoredLabel>,
    pub quality: QualityReport,
    pub model_id: String,
    pub latency_ms: f64,
    pub explanation_seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanations: Option<ExplainBundle>,
}

/// Ranks class probabilities, highest first, ties by class index.
pub fn rank(probs: &[f64], classes: &[String], top_k: usize) -> Vec<ScoredLabel> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(top_k)
        .map(|i| ScoredLabel { label: classes[i].clone(), class_index: i, confidence: probs[i] })
        .collect()
}

fn png_base64(img: &RgbImage) -> Result<String, String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

pub(crate) async fn read_image(mut multipart: Multipart, limit: usize) -> Result<DynamicImage, ApiError> {
    let multipart_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large(limit)
        } else {
            ApiError::bad_request("bad_multipart", e.body_text())
        }
    };
    while let Some(field) = multipart.next_field().await.map_err(multipart_err)? {
        if field.name() != Some("image") {
            continue;
        }
        let bytes = field.bytes().await.map_err(multipart_err)?;
        if bytes.len() > limit {
            return Err(too_large(limit));
        }
        return image::load_from_memory(&bytes)
            .map_err(|e| ApiError::bad_request("not_decodable", format!("not a decodable image: {e}")))
            .and_then(|img| {
                if img.width() == 0 || img.height() == 0 {
                    Err(ApiError::bad_request("not_decodable", "not a decodable image: zero area"))
                } else {
                    Ok(img)
                }
            });
    }
    Err(ApiError::bad_request("missing_image", "multipart field \"image\" is required"))
}

fn too_large(limit: usize) -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "payload_too_large",
        format!("upload exceeds the {limit}-byte limit"),
    )
}

/// Runs the requested explanations for `target`. Failures become warnings.
async fn explain(
    state: &AppState,
    model: Arc<LoadedModel>,
    rgb: Arc<RgbImage>,
    target: usize,
    mode: ExplainMode,
    warnings: &mut Vec<String>,
) -> Option<ExplainBundle> {
    let permit = state.inner.explain_permits.clone().acquire_owned().await.ok()?;
    let config = state.config().clone();
    let task = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let mut warnings = Vec::new();
        let mut bundle = ExplainBundle {
            lime: None,
            gradcam: None,
            target_class: target,
            target_label: model.model.taxonomy.name(target).unwrap_or_default().to_string(),
            seed: config.explain_seed,
            lime_surrogate_r2: None,
            lime_segments: None,
            gradcam_layer: None,
        };
        if mode.lime() {
            let lime_config = config.lime_config();
            let result = lime_explain(&model.model, &rgb, target, &lime_config)
                .map(|e| e.at_resolution(rgb.width(), rgb.height()))
                .and_then(|e| Ok((render_lime(&rgb, &e, lime_config.top_k)?, e)));
            match result.map_err(|e| e.to_string()).and_then(|(img, e)| Ok((png_base64(&img)?, e))) {
                Ok((png, e)) => {
                    bundle.lime = Some(png);
                    bundle.lime_surrogate_r2 = Some(e.surrogate_r2);
                    bundle.lime_segments = Some(e.superpixels.num_segments);
                }
                Err(e) => warnings.push(format!("lime explanation failed: {e}")),
            }
        }
        if mode.gradcam() {
            let layer = config.explain.gradcam_layer.as_deref();
            let result = gradcam_explain(&model.model, &rgb, target, layer)
                .and_then(|h| Ok((render_gradcam(&rgb, &h)?, h)));
            match result.map_err(|e| e.to_string()).and_then(|(img, h)| Ok((png_base64(&img)?, h))) {
                Ok((png, h)) => {
                    bundle.gradcam = Some(png);
                    if h.all_zero {
                        warnings.push("grad-cam map is all zero for the predicted class".into());
                    }
                    bundle.gradcam_layer = Some(h.source_layer);
                }
                Err(e) => warnings.push(format!("grad-cam explanation failed: {e}")),
            }
        }
        (bundle, warnings)
    });
    match task.await {
        Ok((bundle, w)) => {
            warnings.extend(w);
            Some(bundle)
        }
        Err(e) => {
            warnings.push(format!("explanation aborted: {e}"));
            None
        }
    }
}

pub(crate) async fn run_prediction(
    state: &AppState,
    img: DynamicImage,
    top_k: usize,
    mode: ExplainMode,
) -> Result<PredictionResult, ApiError> {
    let start = Instant::now();
    let model = state.model()?;
    let k = model.model.num_classes();
    if top_k == 0 {
        return Err(ApiError::bad_request("invalid_top_k", "top_k must be at least 1"));
    }
    let rgb = Arc::new(img.to_rgb8());
    let thresholds = state.config().quality;
    let (m, r) = (model.clone(), rgb.clone());
    let (probs, quality) = tokio::task::spawn_blocking(move || {
        let quality = quality_gate(&r, &thresholds);
        let probs = m.model.predict_image(&DynamicImage::ImageRgb8((*r).clone()));
        (probs, quality)
    })
    .await
    .map_err(|e| ApiError::internal(format!("prediction task failed: {e}")))?;
    let probs = probs.map_err(|e| ApiError::internal(format!("prediction failed: {e}")))?;
    let predictions = rank(&probs, model.model.taxonomy.classes(), top_k.min(k));

    let mut warnings = Vec::new();
    if !quality.passed {
        warnings.push(format!("image quality gate failed: {}", quality.reasons.join("; ")));
    }
    let explanations = if mode == ExplainMode::None {
        None
    } else {
        explain(state, model.clone(), rgb, predictions[0].class_index, mode, &mut warnings).await
    };
    Ok(PredictionResult {
        predictions,
        quality,
        model_id: model.model_id.clone(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        explanation_seed: state.config().explain_seed,
        warnings,
        explanations,
    })
}

async fn predict(
    State(state): State<AppState>,
    params: Result<Query<PredictParams>, QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<PredictionResult>, ApiError> {
    let Query(params) = params.map_err(|e| ApiError::bad_request("invalid_query", e.body_text()))?;
    let multipart = multipart.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            too_large(state.config().upload_limit_bytes)
        } else {
            ApiError::bad_request("bad_multipart", e.body_text())
        }
    })?;
    let img = read_image(multipart, state.config().upload_limit_bytes).await?;
    let result = run_prediction(&state, img, params.top_k.unwrap_or(3), params.explain).await?;
    tracing::info!(
        top = %result.predictions[0].label,
        latency_ms = result.latency_ms,
        "predict"
    );
    Ok(Json(result))
}

/// Binds `addr`, loads the artifact in the background (health reports
/// "loading" meanwhile) and serves until Ctrl-C. A load failure stops the
/// server and is returned.
pub async fn run(addr: SocketAddr, artifact: &Path, config: ServiceConfig) -> Result<(), ServeError> {
    // Fail fast on an obviously missing artifact, before binding.
    if !artifact.is_file() {
        return Err(ServeError::Artifact {
            path: artifact.display().to_string(),
            source: ModelError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")),
        });
    }
    let state = AppState::loading(config);
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let app = router(state.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    let path = artifact.to_path_buf();
    let loaded = tokio::task::spawn_blocking(move || load_artifact(&path))
        .await
        .map_err(|e| ServeError::Loader(e.to_string()))?;
    match loaded {
        Ok(m) => {
            tracing::info!(model_id = %m.model_id, classes = m.model.num_classes(), "model ready");
            state.install(m)?;
        }
        Err(e) => {
            server.abort();
            return Err(e);
        }
    }
    server.await.map_err(|e| ServeError::Loader(e.to_string()))??;
    Ok(())
}

pub(crate) fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub(crate) fn html_response(status: StatusCode, body: String) -> impl IntoResponse {
    (status, Html(body))
}
