//! HTTP control API and server-sent event stream.
//!
//! | method | path                 | body                                     |
//! |--------|----------------------|------------------------------------------|
//! | GET    | /v1/session/status   |                                          |
//! | POST   | /v1/session/start    |                                          |
//! | POST   | /v1/session/stop     |                                          |
//! | POST   | /v1/mode             | `{"mode": "auto" \| "wizard"}`           |
//! | POST   | /v1/nudge            | `{genre?, item_id?, story_id?, segment?}`|
//! | POST   | /v1/note             | `{"text": "...", "t": 12}`               |
//! | GET    | /v1/events           | SSE: `tick`, `policy`, `end`, `lagged`   |
//!
//! Errors are JSON `{reason, message}`. Commands that do not fit the session
//! state answer 409.

use std::convert::Infallible;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;

use lull_core::content::NudgeRequest;

use crate::session::{CommandError, OperatorMode, ServerEvent, SessionController};

/// Longest a handler waits for the tick loop to answer a command.
pub const COMMAND_TIMEOUT: Duration = Duration::from_secs(5);

pub fn router(ctl: SessionController) -> Router {
    Router::new()
        .route("/v1/session/status", get(status))
        .route("/v1/session/start", post(start))
        .route("/v1/session/stop", post(stop))
        .route("/v1/mode", post(set_mode))
        .route("/v1/nudge", post(nudge))
        .route("/v1/note", post(note))
        .route("/v1/events", get(events))
        .with_state(ctl)
}

pub struct ApiError(CommandError);

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        Self(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self(CommandError {
            status: e.status().as_u16(),
            reason: "bad_request",
            message: e.body_text(),
        })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

async fn bounded<T>(fut: impl std::future::Future<Output = Result<T, CommandError>>) -> Result<T, ApiError> {
    match tokio::time::timeout(COMMAND_TIMEOUT, fut).await {
        Ok(r) => r.map_err(ApiError),
        Err(_) => Err(ApiError(CommandError {
            status: 503,
            reason: "busy",
            message: "the tick loop did not answer in time".into(),
        })),
    }
}

async fn status(State(ctl): State<SessionController>) -> impl IntoResponse {
    Json(ctl.status())
}

async fn start(State(ctl): State<SessionController>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(ctl.start()?))
}

async fn stop(State(ctl): State<SessionController>) -> Result<impl IntoResponse, ApiError> {
    bounded(ctl.stop()).await?;
    Ok(Json(serde_json::json!({ "stopping": true })))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModeBody {
    pub mode: OperatorMode,
}

async fn set_mode(
    State(ctl): State<SessionController>,
    body: Result<Json<ModeBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(body) = body?;
    let mode = bounded(ctl.set_mode(body.mode)).await?;
    Ok(Json(ModeBody { mode }))
}

async fn nudge(
    State(ctl): State<SessionController>,
    body: Result<Json<NudgeRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    if req.segment.is_some() && req.story_id.is_none() {
        return Err(CommandError::unprocessable("bad_request", "`segment` needs `story_id`").into());
    }
    let item = bounded(ctl.nudge(req)).await?;
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "queued": item }))))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteBody {
    pub text: String,
    #[serde(default)]
    pub t: Option<u64>,
}

async fn note(
    State(ctl): State<SessionController>,
    body: Result<Json<NoteBody>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(body) = body?;
    let note = bounded(ctl.note(body.text, body.t)).await?;
    Ok(Json(note))
}

async fn events(State(ctl): State<SessionController>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = ctl.subscribe();
    // A session that already ended gets its final status and nothing else.
    let over = ctl.status().state.is_over();
    let stream = stream::unfold((rx, over), |(mut rx, done)| async move {
        if done {
            return None;
        }
        let ev = match rx.recv().await {
            Ok(ev) => {
                let end = matches!(ev, ServerEvent::End(_));
                return Some((Ok(Event::default().event(ev.name()).data(ev.data_json())), (rx, end)));
            }
            Err(RecvError::Lagged(n)) => Event::default()
                .event("lagged")
                .data(serde_json::json!({ "missed": n }).to_string()),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(ev), (rx, false)))
    });
    let hello = if over {
        Event::default().event("end").data(
            serde_json::json!({
                "state": ctl.status().state,
                "ticks": ctl.status().t.map_or(0, |t| t + 1),
                "telemetry": ctl.status().telemetry,
            })
            .to_string(),
        )
    } else {
        Event::default().event("status").data(serde_json::to_string(&ctl.status()).expect("status serializes"))
    };
    Sse::new(stream::once(async move { Ok(hello) }).chain(stream)).keep_alive(KeepAlive::default())
}

use futures::StreamExt as _;
