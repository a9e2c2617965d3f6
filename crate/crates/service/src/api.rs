//! JSON routes. Every body, errors included, carries `schema_version`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lineadapt::image::LineImage;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::project::{Project, RoundRecord, RoundState, Submitted, Suggestion};
use crate::service::{RoundRequest, Service};
use crate::SCHEMA_VERSION;

type ApiResult = Result<Response, ApiError>;

#[derive(Serialize)]
struct Envelope<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn reply<T: Serialize>(status: StatusCode, body: T) -> Response {
    (status, Json(Envelope { schema_version: SCHEMA_VERSION, body })).into_response()
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/projects", post(create_project))
        .route("/projects/{id}/lines", post(upload_lines))
        .route("/projects/{id}/suggestions", get(suggestions))
        .route("/projects/{id}/lines/{line_id}/transcript", post(submit_transcript))
        .route("/projects/{id}/rounds", post(start_round))
        .route("/projects/{id}/rounds/{n}", get(round))
        .route("/projects/{id}/status", get(status))
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async { ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed") })
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(service)
}

fn project(svc: &Service, id: &str) -> Result<Arc<Project>, ApiError> {
    svc.project(id).ok_or_else(|| ApiError::not_found(format!("no project {id}")))
}

/// Rejections from axum's extractors keep their status but get the JSON body.
fn rejected(e: impl std::fmt::Display, status: StatusCode) -> ApiError {
    ApiError::new(status, e.to_string())
}

/// Parses a JSON body; an empty body yields `T::default()` when `empty` is given.
fn parse<T: serde::de::DeserializeOwned>(bytes: &Bytes, empty: Option<T>) -> Result<T, ApiError> {
    match empty {
        Some(d) if bytes.iter().all(u8::is_ascii_whitespace) => Ok(d),
        _ => serde_json::from_slice(bytes).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}"))),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

async fn health() -> Response {
    reply(StatusCode::OK, Health { status: "ok" })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProject {
    #[serde(default)]
    rerank: bool,
}

#[derive(Serialize)]
struct Created {
    project_id: String,
    rerank: bool,
}

async fn create_project(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult {
    let req: CreateProject = parse(&body, Some(CreateProject::default()))?;
    let p = svc.create_project(req.rerank);
    Ok(reply(StatusCode::CREATED, Created { project_id: p.id.clone(), rerank: p.rerank }))
}

#[derive(Serialize)]
struct Uploaded {
    added: Vec<String>,
    eval_added: usize,
    pool_lines: usize,
}

/// Multipart upload. Each `image` part is a PNG. Text parts `line_id` and
/// `eval_transcript` apply to the next image; an image preceded by
/// `eval_transcript` joins the evaluation set instead of the pool.
async fn upload_lines(State(svc): State<Arc<Service>>, Path(id): Path<String>, mut parts: Multipart) -> ApiResult {
    let p = project(&svc, &id)?;
    let mut staged: Vec<(Option<String>, Option<String>, LineImage)> = Vec::new();
    let (mut line_id, mut eval) = (None, None);
    while let Some(field) = parts.next_field().await.map_err(|e| rejected(&e, e.status()))? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "line_id" => line_id = Some(field.text().await.map_err(|e| rejected(&e, e.status()))?),
            "eval_transcript" => eval = Some(field.text().await.map_err(|e| rejected(&e, e.status()))?),
            "image" => {
                let bytes = field.bytes().await.map_err(|e| rejected(&e, e.status()))?;
                let img = LineImage::from_png(&bytes).map_err(|e| ApiError::unprocessable(e.to_string()))?;
                staged.push((line_id.take(), eval.take(), img));
            }
            other => return Err(ApiError::bad_request(format!("unexpected multipart field {other:?}"))),
        }
    }
    if staged.is_empty() {
        return Err(ApiError::bad_request("no image parts"));
    }
    let mut out = Uploaded { added: Vec::new(), eval_added: 0, pool_lines: 0 };
    for (lid, transcript, img) in staged {
        match transcript {
            Some(t) => {
                p.add_eval_line(img, t)?;
                out.eval_added += 1;
            }
            None => out.added.push(p.add_line(lid, img)?),
        }
    }
    out.pool_lines = p.counts().0;
    Ok(reply(StatusCode::CREATED, out))
}

#[derive(Serialize)]
struct Suggestions {
    /// `"ok"`, or `"empty"` once every pool line is annotated.
    status: &'static str,
    ranking: &'static str,
    checkpoint: String,
    suggestions: Vec<Suggestion>,
}

async fn suggestions(State(svc): State<Arc<Service>>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let p = project(&svc, &id)?;
    let k = match q.get("k") {
        Some(v) => v.parse::<usize>().map_err(|_| ApiError::bad_request(format!("k must be a non-negative integer, got {v:?}")))?,
        None => 10,
    };
    let batch = svc.decode_batch_size;
    let checkpoint = p.published().label;
    let (rerank, worker) = (p.rerank, p.clone());
    let list = blocking(move || worker.suggest(k, batch)).await?;
    let status = if list.is_empty() && p.counts().1 >= p.counts().0 { "empty" } else { "ok" };
    Ok(reply(
        StatusCode::OK,
        Suggestions { status, ranking: if rerank { "rerank" } else { "one_shot" }, checkpoint, suggestions: list },
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptBody {
    transcript: String,
}

#[derive(Serialize)]
struct TranscriptAck {
    line_id: String,
    /// False when the transcript equals the line's current one.
    logged: bool,
    annotated_lines: usize,
}

async fn submit_transcript(
    State(svc): State<Arc<Service>>,
    Path((id, line_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult {
    let p = project(&svc, &id)?;
    let body: TranscriptBody = parse(&body, None)?;
    let logged = p.submit(&line_id, body.transcript)? == Submitted::Logged;
    Ok(reply(StatusCode::OK, TranscriptAck { line_id, logged, annotated_lines: p.counts().1 }))
}

#[derive(Serialize)]
struct RoundStarted {
    round: usize,
    state: RoundState,
}

async fn start_round(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    let p = project(&svc, &id)?;
    let req: RoundRequest = parse(&body, None)?;
    let round = svc.start_round(&p, &req)?;
    Ok(reply(StatusCode::ACCEPTED, RoundStarted { round, state: RoundState::Running }))
}

async fn round(State(svc): State<Arc<Service>>, Path((id, n)): Path<(String, String)>) -> ApiResult {
    let p = project(&svc, &id)?;
    let r = n.parse().ok().and_then(|n| p.round(n)).ok_or_else(|| ApiError::not_found(format!("project {id} has no round {n}")))?;
    Ok(reply(StatusCode::OK, r))
}

#[derive(Serialize)]
struct RoundSummary {
    number: usize,
    state: RoundState,
    criterion: String,
    mask: String,
    lines: usize,
    epochs_run: usize,
    decided_epoch: Option<usize>,
    eval_cer: Option<f64>,
}

impl From<&RoundRecord> for RoundSummary {
    fn from(r: &RoundRecord) -> Self {
        RoundSummary {
            number: r.number,
            state: r.state,
            criterion: r.criterion.to_string(),
            mask: r.mask.clone(),
            lines: r.line_ids.len(),
            epochs_run: r.trace.len(),
            decided_epoch: r.decision.as_ref().map(|d| d.epoch),
            eval_cer: r.eval_cer,
        }
    }
}

#[derive(Serialize)]
struct Progress {
    round: usize,
    phase: String,
    epoch: usize,
    planned_epochs: usize,
    train_cer_clean: Option<f64>,
    train_loss_clean: Option<f64>,
    /// CF_CER only: the threshold and the latest loss minus it.
    threshold: Option<f64>,
    threshold_distance: Option<f64>,
}

#[derive(Serialize)]
struct Status {
    project_id: String,
    pool_lines: usize,
    annotated_lines: usize,
    annotations_logged: usize,
    eval_lines: usize,
    checkpoint: String,
    training: bool,
    progress: Option<Progress>,
    rounds: Vec<RoundSummary>,
}

async fn status(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let p = project(&svc, &id)?;
    let (pool, annotated, logged, eval) = p.counts();
    let rounds = p.rounds();
    let progress = rounds.iter().rev().find(|r| r.state == RoundState::Running).map(|r| Progress {
        round: r.number,
        phase: r.phase.clone(),
        epoch: r.trace.len(),
        planned_epochs: r.planned_epochs,
        train_cer_clean: r.trace.last().map(|t| t.train_cer_clean),
        train_loss_clean: r.trace.last().map(|t| t.train_loss_clean),
        threshold: r.threshold,
        threshold_distance: r.threshold.zip(r.trace.last()).map(|(tau, t)| t.train_loss_clean - tau),
    });
    Ok(reply(
        StatusCode::OK,
        Status {
            project_id: p.id.clone(),
            pool_lines: pool,
            annotated_lines: annotated,
            annotations_logged: logged,
            eval_lines: eval,
            checkpoint: p.published().label,
            training: p.is_training(),
            progress,
            rounds: rounds.iter().map(RoundSummary::from).collect(),
        },
    ))
}
