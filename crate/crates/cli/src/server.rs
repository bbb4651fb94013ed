//! Session HTTP API.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | `{scene}` | `{id}` |
//! | GET | `/sessions/{id}` | | scene, accepted expressions, argmax |
//! | POST | `/sessions/{id}/expressions` | `{text, mode}` | field, argmax, components |
//! | GET | `/sessions/{id}/field?resolution=N` | | `{grid, values}` |
//! | GET | `/sessions/{id}/argmax` | | `{argmax, score, steps}` |
//! | DELETE | `/sessions/{id}` | | 204 |
//!
//! Errors reply `{kind, message, detail}`.

use crate::commands::{llm_client, load_table, read_file, ServeArgs};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use grounding_core::estimator::{EstimatorModel, FittedEstimator};
use grounding_core::grounding::{Estimator, Mode};
use grounding_core::scene::{SceneGraph, DEFAULT_NEAR_FACTOR};
use grounding_core::session::{Engine, SessionStore};
use grounding_core::{Error, Result};
use serde::Deserialize;
use serde_json::{json, Value};
use std::sync::Arc;

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Parse { .. }
        | Error::LlmSchema(_)
        | Error::UnknownPredicate(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::Scene(_)
        | Error::Config(_) => StatusCode::BAD_REQUEST,
        Error::Contradiction(_) | Error::EmptyField => StatusCode::CONFLICT,
        Error::UnknownSession(_) => StatusCode::NOT_FOUND,
        Error::LlmTransport(_) => StatusCode::BAD_GATEWAY,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(crate::error_json(&self.0))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Store = Arc<SessionStore>;

/// Runs blocking estimator work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Domain(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    scene: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepBody {
    text: String,
    #[serde(default = "default_mode")]
    mode: Mode,
}

fn default_mode() -> Mode {
    Mode::Fitted
}

#[derive(Deserialize)]
struct FieldQuery {
    resolution: Option<usize>,
}

async fn create(State(store): State<Store>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: CreateBody = serde_json::from_slice(&body).map_err(Error::from)?;
    let scene = SceneGraph::from_json(&body.scene, DEFAULT_NEAR_FACTOR)?;
    let id = blocking(move || store.create(scene)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn describe(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let v = blocking(move || {
        store.with_session(&id, |s| {
            let (argmax, score) = s.argmax()?;
            let history: Vec<Value> = s.history.iter().map(|(t, m)| json!({ "text": t, "mode": m })).collect();
            Ok(json!({
                "id": s.id,
                "scene": s.scene.to_json(),
                "grid": s.grid,
                "expressions": history,
                "argmax": argmax,
                "score": score,
            }))
        })
    })
    .await?;
    Ok(Json(v))
}

async fn step(State(store): State<Store>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: StepBody = serde_json::from_slice(&body).map_err(Error::from)?;
    let r = blocking(move || store.step(&id, &body.text, body.mode)).await?;
    Ok(Json(serde_json::to_value(r).map_err(Error::from)?))
}

async fn field(
    State(store): State<Store>,
    Path(id): Path<String>,
    Query(q): Query<FieldQuery>,
) -> ApiResult<Json<Value>> {
    let f = blocking(move || store.with_session(&id, |s| s.field_at(q.resolution.unwrap_or(s.grid.resolution)))).await?;
    Ok(Json(serde_json::to_value(f).map_err(Error::from)?))
}

async fn argmax(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let v = blocking(move || {
        store.with_session(&id, |s| {
            let (p, score) = s.argmax()?;
            Ok(json!({ "argmax": p, "score": score, "steps": s.history.len() }))
        })
    })
    .await?;
    Ok(Json(v))
}

async fn remove(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || store.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn fallback() -> (StatusCode, Json<Value>) {
    (StatusCode::NOT_FOUND, Json(json!({ "kind": "not_found", "message": "no such route", "detail": null })))
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(describe).delete(remove))
        .route("/sessions/{id}/expressions", post(step))
        .route("/sessions/{id}/field", get(field))
        .route("/sessions/{id}/argmax", get(argmax))
        .fallback(fallback)
        .with_state(store)
}

pub fn build_store(args: &ServeArgs) -> Result<SessionStore> {
    let mut engine = Engine { fitted: FittedEstimator::new(load_table(args.table.as_deref())?), ..Default::default() };
    if let Some(p) = &args.model {
        engine.learned = Some(Estimator::Learned(Box::new(EstimatorModel::from_json_str(&read_file(p)?)?)));
    }
    if args.llm_fallback {
        engine.llm = Some(llm_client(&args.llm)?);
    }
    let mut store = SessionStore::new(engine).with_resolution(args.resolution)?;
    if let Some(j) = &args.journal {
        store = store.with_journal(j)?;
    }
    Ok(store)
}

pub fn serve_blocking(args: ServeArgs) -> Result<()> {
    let store = Arc::new(build_store(&args)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(store)).await?;
        Ok(())
    })
}
