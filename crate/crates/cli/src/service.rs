//! Read-only HTTP access to a loaded index.
//!
//! `POST /count {"query"}`, `POST /cooc {"head", "tail"}` and `GET /health`.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use corag::index::{CorpusIndex, PhraseQuery};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const MAX_PHRASE_TOKENS: usize = 64;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRequest {
    pub query: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoocRequest {
    pub head: String,
    pub tail: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CountResponse {
    pub count: u64,
}

fn bad_request(message: impl Into<String>) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({ "error": message.into() })),
    )
        .into_response()
}

fn phrase(field: &str, text: &str) -> Result<PhraseQuery, String> {
    let phrase = PhraseQuery::parse(text).map_err(|e| format!("{field}: {e}"))?;
    if phrase.len() > MAX_PHRASE_TOKENS {
        return Err(format!(
            "{field}: phrase has {} tokens, limit is {MAX_PHRASE_TOKENS}",
            phrase.len()
        ));
    }
    Ok(phrase)
}

async fn count(
    State(index): State<Arc<CorpusIndex>>,
    body: Result<Json<CountRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return bad_request(e.body_text()),
    };
    match phrase("query", &req.query) {
        Ok(q) => Json(CountResponse {
            count: index.freq(&q),
        })
        .into_response(),
        Err(message) => bad_request(message),
    }
}

async fn cooc(
    State(index): State<Arc<CorpusIndex>>,
    body: Result<Json<CoocRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return bad_request(e.body_text()),
    };
    let (head, tail) = match (phrase("head", &req.head), phrase("tail", &req.tail)) {
        (Ok(h), Ok(t)) => (h, t),
        (Err(message), _) | (_, Err(message)) => return bad_request(message),
    };
    Json(CountResponse {
        count: index.cooc(&head, &tail),
    })
    .into_response()
}

async fn health(State(index): State<Arc<CorpusIndex>>) -> Response {
    Json(json!({ "status": "ok", "tokens": index.token_count() })).into_response()
}

pub fn router(index: Arc<CorpusIndex>) -> Router {
    Router::new()
        .route("/count", post(count))
        .route("/cooc", post(cooc))
        .route("/health", get(health))
        .with_state(index)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(
    listener: tokio::net::TcpListener,
    index: Arc<CorpusIndex>,
) -> std::io::Result<()> {
    axum::serve(listener, router(index))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
