//! JSON-over-HTTP session API.
//!
//! | method | path                          | success |
//! |--------|-------------------------------|---------|
//! | POST   | `/api/sessions`               | 201     |
//! | POST   | `/api/sessions/{id}/drag`     | 202     |
//! | GET    | `/api/sessions/{id}/progress` | 200     |
//! | GET    | `/api/sessions/{id}/events`   | 200 SSE |
//! | GET    | `/api/sessions/{id}/result`   | 200     |
//! | GET    | `/api/health`                 | 200     |
//!
//! A session moves `created → inverted → optimizing → denoising → done`, or
//! to `failed` from any running state, and accepts one drag job.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use dragnoise_core::diffusion::Diffusion;
use dragnoise_core::drag::{
    DragInstruction, DragPair, DragParams, DragProgress, DragStatus, Point,
};
use dragnoise_core::tensor::Tensor;
use dragnoise_core::unet::{FeatureTap, UNet};
use dragnoise_core::Error as CoreError;
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::edit::{run_drag, Stage};
use crate::image_io::{decode_png, encode_png, to_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Created,
    Inverted,
    Optimizing,
    Denoising,
    Done,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Done | SessionState::Failed)
    }

    fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Created, Inverted)
                | (Inverted, Optimizing)
                | (Optimizing, Denoising)
                | (Denoising, Done)
                | (Created | Inverted | Optimizing | Denoising, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub alignment: f64,
    pub mask: f64,
}

/// Body of `GET /progress` and of each SSE event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressBody {
    pub state: SessionState,
    pub iteration: usize,
    pub losses: Losses,
    pub anchors: Vec<Point>,
    pub trajectory_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBody {
    pub image_png_base64: String,
    pub md: f64,
    pub fidelity: f64,
    pub status: DragStatus,
}

pub struct SessionRecord {
    pub id: String,
    pub image: Tensor<f32>,
    pub state: SessionState,
    /// Every state entered, in order.
    pub history: Vec<SessionState>,
    pub job_started: bool,
    pub progress: ProgressBody,
    pub result: Option<ResultBody>,
}

impl SessionRecord {
    fn advance(&mut self, next: SessionState) {
        if self.state.can_move_to(next) {
            self.state = next;
            self.progress.state = next;
            self.history.push(next);
        }
    }
}

type Shared<T> = Arc<Mutex<T>>;

pub struct AppState {
    pub net: Arc<UNet<f32>>,
    pub diffusion: Arc<Diffusion>,
    pub model: String,
    pub max_jobs: usize,
    pub data_dir: Option<PathBuf>,
    running: AtomicUsize,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<String, Shared<SessionRecord>>>,
}

impl AppState {
    pub fn new(
        net: UNet<f32>,
        model: String,
        max_jobs: usize,
        data_dir: Option<PathBuf>,
    ) -> Arc<Self> {
        Arc::new(Self {
            net: Arc::new(net),
            diffusion: Arc::new(Diffusion::default()),
            model,
            max_jobs: max_jobs.max(1),
            data_dir,
            running: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn session(&self, id: &str) -> Option<Shared<SessionRecord>> {
        self.sessions
            .lock()
            .expect("session store")
            .get(id)
            .cloned()
    }

    fn image_size(&self) -> usize {
        self.net.config.image_size
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::DegenerateDrag
            | CoreError::OutOfBounds { .. }
            | CoreError::InvalidArgument { .. }
            | CoreError::ShapeMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

fn png_b64(t: &Tensor<f32>) -> ApiResult<String> {
    encode_png(t)
        .map(|b| B64.encode(b))
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn decode_b64_png(s: &str, what: &str) -> ApiResult<Tensor<f32>> {
    let bytes = B64
        .decode(s.trim())
        .map_err(|e| unprocessable(format!("{what}: bad base64: {e}")))?;
    decode_png(&bytes).map_err(|e| unprocessable(format!("{what}: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/drag", post(start_drag))
        .route("/api/sessions/{id}/progress", get(progress))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/sessions/{id}/result", get(result))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "model": app.model,
        "image_size": app.image_size(),
        "K": app.diffusion.k(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub image_png_base64: Option<String>,
    pub sample_seed: Option<u64>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let s = app.image_size();
    let image = match (body.image_png_base64, body.sample_seed) {
        (Some(b64), None) => {
            let img = decode_b64_png(&b64, "image")?;
            if img.shape() != [1, 1, s, s] {
                return Err(unprocessable(format!(
                    "image must be {s}x{s}, got {:?}",
                    &img.shape()[2..]
                )));
            }
            img
        }
        (None, Some(seed)) => {
            let app = app.clone();
            tokio::task::spawn_blocking(move || {
                app.diffusion
                    .generate(app.net.as_ref(), seed, &[1, 1, s, s])
            })
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??
        }
        _ => {
            return Err(unprocessable(
                "give exactly one of image_png_base64 and sample_seed",
            ))
        }
    };
    let encoded = png_b64(&image)?;
    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let record = SessionRecord {
        id: id.clone(),
        image,
        state: SessionState::Created,
        history: vec![SessionState::Created],
        job_started: false,
        progress: ProgressBody {
            state: SessionState::Created,
            iteration: 0,
            losses: Losses {
                alignment: 0.0,
                mask: 0.0,
            },
            anchors: Vec::new(),
            trajectory_len: 0,
            error: None,
        },
        result: None,
    };
    app.sessions
        .lock()
        .expect("session store")
        .insert(id.clone(), Arc::new(Mutex::new(record)));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "id": id, "image_png_base64": encoded })),
    ))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PairBody {
    pub a: [f32; 2],
    pub b: [f32; 2],
}

/// Optional overrides of [`DragParams`]; `tap` is the optimized tap.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsBody {
    pub t_edit: Option<usize>,
    pub t_refine: Option<usize>,
    pub r1: Option<usize>,
    pub r2: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub max_steps: Option<usize>,
    pub propagate: Option<bool>,
    pub tap: Option<FeatureTap>,
}

impl ParamsBody {
    pub fn apply(&self, mut p: DragParams) -> DragParams {
        p.t_edit = self.t_edit.unwrap_or(p.t_edit);
        p.t_refine = self.t_refine.unwrap_or(p.t_refine);
        p.r1 = self.r1.unwrap_or(p.r1);
        p.r2 = self.r2.unwrap_or(p.r2);
        p.lambda = self.lambda.unwrap_or(p.lambda);
        p.lr = self.lr.unwrap_or(p.lr);
        p.max_steps = self.max_steps.unwrap_or(p.max_steps);
        p.propagate = self.propagate.unwrap_or(p.propagate);
        p.optimized_tap = self.tap.unwrap_or(p.optimized_tap);
        p
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DragBody {
    pub pairs: Vec<PairBody>,
    pub mask_png_base64: Option<String>,
    pub params: Option<ParamsBody>,
}

/// Releases a job slot when the job ends, however it ends.
struct Slot(Arc<AppState>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.running.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn start_drag(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<DragBody>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let record = app.session(&id).ok_or_else(|| not_found(&id))?;
    let s = app.image_size();
    let pairs: Vec<DragPair> = body
        .pairs
        .iter()
        .map(|p| DragPair {
            a: (p.a[0], p.a[1]),
            b: (p.b[0], p.b[1]),
        })
        .collect();
    let mut instruction = DragInstruction::new(pairs);
    if let Some(m) = &body.mask_png_base64 {
        instruction = instruction.with_mask(
            to_mask(&decode_b64_png(m, "mask")?).map_err(|e| unprocessable(e.to_string()))?,
        );
    }
    instruction.validate(s)?;
    let params = body
        .params
        .clone()
        .unwrap_or_default()
        .apply(DragParams::default());
    params.validate(app.diffusion.k())?;
    if !app.net.config.contains(params.optimized_tap) {
        return Err(unprocessable(format!(
            "{} does not exist in this model",
            params.optimized_tap
        )));
    }

    let image = {
        let mut rec = record.lock().expect("session");
        if rec.job_started {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!(
                    "session is {:?}; a drag already ran or is running",
                    rec.state
                )
                .to_lowercase(),
            ));
        }
        if app.running.fetch_add(1, Ordering::SeqCst) >= app.max_jobs {
            app.running.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError(
                StatusCode::SERVICE_UNAVAILABLE,
                "too many running drag jobs".into(),
            ));
        }
        rec.job_started = true;
        rec.image.clone()
    };
    let slot = Slot(app.clone());
    let job_app = app.clone();
    tokio::task::spawn_blocking(move || {
        let _slot = slot;
        run_job(&job_app, &record, &image, &instruction, &params);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": "started" }))))
}

fn run_job(
    app: &AppState,
    record: &Mutex<SessionRecord>,
    image: &Tensor<f32>,
    instruction: &DragInstruction<f32>,
    params: &DragParams,
) {
    let with = |f: &mut dyn FnMut(&mut SessionRecord)| f(&mut record.lock().expect("session"));
    let outcome = run_drag(
        &app.net,
        &app.diffusion,
        image,
        instruction,
        params,
        |stage| {
            let next = match stage {
                Stage::Inverted => SessionState::Inverted,
                Stage::Optimizing => SessionState::Optimizing,
                Stage::Denoising => SessionState::Denoising,
            };
            with(&mut |r| r.advance(next));
        },
        |p: &DragProgress| {
            with(&mut |r| {
                r.progress.iteration = p.iteration;
                r.progress.losses = Losses {
                    alignment: p.alignment,
                    mask: p.mask,
                };
                r.progress.anchors = p.anchors.clone();
                r.progress.trajectory_len = p.trajectory_len;
            })
        },
    );
    let finished = outcome
        .map_err(|e| e.to_string())
        .and_then(|(edited, report)| {
            let png = encode_png(&edited).map_err(|e| e.to_string())?;
            if let Some(dir) = &app.data_dir {
                let id = record.lock().expect("session").id.clone();
                std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::write(dir.join(format!("{id}.png")), &png))
                    .map_err(|e| e.to_string())?;
            }
            Ok(ResultBody {
                image_png_base64: B64.encode(png),
                md: report.md,
                fidelity: report.fidelity,
                status: report.status,
            })
        });
    with(&mut |r| match &finished {
        Ok(body) => {
            r.result = Some(body.clone());
            r.advance(SessionState::Done);
        }
        Err(msg) => {
            r.progress.error = Some(msg.clone());
            r.advance(SessionState::Failed);
        }
    });
}

async fn progress(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ProgressBody>> {
    let record = app.session(&id).ok_or_else(|| not_found(&id))?;
    let body = record.lock().expect("session").progress.clone();
    Ok(Json(body))
}

async fn result(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ResultBody>> {
    let record = app.session(&id).ok_or_else(|| not_found(&id))?;
    let rec = record.lock().expect("session");
    match (&rec.result, rec.state) {
        (Some(body), SessionState::Done) => Ok(Json(body.clone())),
        (_, state) => Err(ApiError(
            StatusCode::CONFLICT,
            format!(
                "result not available: session is {}",
                serde_json::to_value(state).expect("state")
            ),
        )),
    }
}

/// Server-sent progress: one event per change, ending after a terminal
/// state.
async fn events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let record = app.session(&id).ok_or_else(|| not_found(&id))?;
    let stream = stream::unfold(
        (record, None::<ProgressBody>, false),
        |(record, last, ended)| async move {
            if ended {
                return None;
            }
            loop {
                let snap = record.lock().expect("session").progress.clone();
                if last.as_ref() != Some(&snap) {
                    let event = Event::default()
                        .event("progress")
                        .json_data(&snap)
                        .expect("progress serializes");
                    let done = snap.state.is_terminal();
                    return Some((Ok(event), (record, Some(snap), done)));
                }
                tokio::time::sleep(Duration::from_millis(25)).await;
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
