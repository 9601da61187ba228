//! Server-rendered fallback page: upload form and a result view with the
//! LIME overlay.

use axum::extract::multipart::MultipartRejection;
use axum::extract::{Multipart, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};

use crate::{html_escape, html_response, read_image, run_prediction, AppState, ExplainMode};

const STYLE: &str = "body{font-family:sans-serif;max-width:46rem;margin:2rem auto;padding:0 1rem}\
table{border-collapse:collapse}td,th{padding:.25rem .75rem;border-bottom:1px solid #ddd;text-align:left}\
.warn{background:#fff4ce;padding:.5rem;border-left:4px solid #e0a800}img{max-width:100%}";

fn layout(body: &str) -> String {
    format!(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>Lesion triage</title>\
         <style>{STYLE}</style></head><body><h1>Lesion triage</h1>{body}</body></html>"
    )
}

const FORM: &str = "<form method=\"post\" action=\"/ui/predict\" enctype=\"multipart/form-data\">\
<input type=\"file\" name=\"image\" accept=\"image/*\" required> <button>Classify</button></form>";

pub(crate) async fn index() -> Html<String> {
    Html(layout(FORM))
}

pub(crate) async fn predict_page(State(state): State<AppState>, multipart: Result<Multipart, MultipartRejection>) -> Response {
    let limit = state.config().upload_limit_bytes;
    let outcome = match multipart {
        Ok(m) => match read_image(m, limit).await {
            Ok(img) => run_prediction(&state, img, 3, ExplainMode::Lime).await,
            Err(e) => Err(e),
        },
        Err(e) => Err(crate::ApiError::bad_request("bad_multipart", e.body_text())),
    };
    match outcome {
        Ok(r) => {
            let mut body = String::new();
            for w in &r.warnings {
                body.push_str(&format!("<p class=\"warn\">{}</p>", html_escape(w)));
            }
            body.push_str("<table><tr><th>Class</th><th>Confidence</th></tr>");
            for p in &r.predictions {
                body.push_str(&format!(
                    "<tr><td>{}</td><td>{:.1}%</td></tr>",
                    html_escape(&p.label),
                    p.confidence * 100.0
                ));
            }
            body.push_str("</table>");
            if let Some(png) = r.explanations.as_ref().and_then(|e| e.lime.as_ref()) {
                body.push_str(&format!(
                    "<h2>LIME</h2><p>Green regions support the prediction, red regions oppose it.</p>\
                     <img alt=\"LIME overlay\" src=\"data:image/png;base64,{png}\">"
                ));
            }
            body.push_str(&format!("<p><small>model {}</small></p>{FORM}", html_escape(&r.model_id)));
            html_response(StatusCode::OK, layout(&body)).into_response()
        }
        Err(e) => html_response(e.status, layout(&format!("<p class=\"warn\">{}</p>{FORM}", html_escape(&e.message)))).into_response(),
    }
}
