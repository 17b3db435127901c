use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hedgefilter::record::StreamRecord;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::api::{FeedbackError, FeedbackSubmission};
use crate::engine::ServiceHandle;

#[derive(Debug, Deserialize)]
struct Since {
    #[serde(default)]
    since: u64,
}

pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/queries", get(queries))
        .route("/feedback", post(feedback))
        .with_state(handle)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, handle: ServiceHandle) -> std::io::Result<()> {
    axum::serve(listener, router(handle)).await
}

async fn state(State(handle): State<ServiceHandle>, Query(q): Query<Since>) -> Json<Vec<StreamRecord>> {
    Json(handle.state(q.since).await)
}

async fn queries(State(handle): State<ServiceHandle>) -> Response {
    match handle.queries().await {
        Some(r) => Json(r).into_response(),
        None => rejection(FeedbackError::Stopped),
    }
}

async fn feedback(State(handle): State<ServiceHandle>, Json(sub): Json<FeedbackSubmission>) -> Response {
    match handle.feedback(sub).await {
        Ok(ack) => Json(ack).into_response(),
        Err(e) => rejection(e),
    }
}

fn rejection(e: FeedbackError) -> Response {
    let status = match e {
        FeedbackError::InvalidLabel { .. } | FeedbackError::MissingId | FeedbackError::MissingTimestep => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        FeedbackError::UnknownQuery { .. } | FeedbackError::OutsideWindow { .. } => StatusCode::NOT_FOUND,
        FeedbackError::DuplicateQuery { .. } | FeedbackError::DuplicateTimestep { .. } => StatusCode::CONFLICT,
        FeedbackError::Expired { .. } => StatusCode::GONE,
        FeedbackError::Stopped => StatusCode::SERVICE_UNAVAILABLE,
    };
    let mut body = serde_json::to_value(&e).unwrap_or_default();
    body["error"] = e.to_string().into();
    (status, Json(body)).into_response()
}
