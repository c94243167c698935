//! HTTP facade over the session registry.
//!
//! State errors and busy sessions answer 409, unknown ids 404, malformed
//! input 400. Error bodies are `{"error": "...", "kind": "..."}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fusionforge_core::{Dataset, FeatureMatrix, WeightVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ServiceError, ServiceResult};
use crate::jobs::{Job, JobKind, Registry, Session};
use crate::pipeline::{self, ClusterRequest, MapRequest, SampleRequest, Target, TransitionRequest, View, WeightInput};
use crate::store::Descriptor;

pub type AppState = Arc<Registry>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        use fusionforge_core::Error as Core;
        let (status, kind) = match &self {
            ServiceError::State { .. } => (StatusCode::CONFLICT, "state"),
            ServiceError::Busy(_) => (StatusCode::CONFLICT, "busy"),
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt"),
            ServiceError::Core(Core::Cancelled) => (StatusCode::CONFLICT, "cancelled"),
            ServiceError::Core(Core::Io { .. }) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            ServiceError::Core(_) => (StatusCode::BAD_REQUEST, "invalid"),
        };
        (status, Json(json!({ "error": self.to_string(), "kind": kind }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(registry: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/sample", post(sample))
        .route("/sessions/{id}/map", post(map))
        .route("/sessions/{id}/embeddings/sample", get(sample_embeddings))
        .route("/sessions/{id}/weights", post(weights))
        .route("/sessions/{id}/propagate", post(propagate))
        .route("/sessions/{id}/cluster", post(cluster))
        .route("/sessions/{id}/transitions", post(transitions))
        .route("/sessions/{id}/heatmap", get(heatmap))
        .route("/sessions/{id}/bench", post(bench))
        .route("/jobs/{jid}", get(get_job).delete(cancel_job))
        .route("/jobs/{jid}/cancel", post(cancel_job))
        .with_state(registry)
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Corrupt(format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
pub struct InlineFeature {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
pub struct InlineDataset {
    #[serde(default = "default_name")]
    pub name: String,
    pub items: Vec<String>,
    pub features: Vec<InlineFeature>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub thumbnails: Option<Vec<String>>,
}

fn default_name() -> String {
    "dataset".into()
}

impl InlineDataset {
    pub fn build(self) -> ServiceResult<Dataset> {
        let sets = self
            .features
            .iter()
            .map(|f| FeatureMatrix::from_rows(&f.name, &f.rows))
            .collect::<fusionforge_core::Result<Vec<_>>>()?;
        Ok(Dataset::new(self.name, self.items, sets, self.labels, self.thumbnails)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum CreateSession {
    Manifest { manifest: PathBuf },
    Inline { dataset: InlineDataset },
}

async fn create_session(State(reg): State<AppState>, Json(body): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Descriptor>)> {
    let descriptor = blocking(move || {
        let dataset = match body {
            CreateSession::Manifest { manifest } => Dataset::load_manifest(&manifest)
                .map_err(|e| ServiceError::bad(format!("{}: {e}", manifest.display())))?,
            CreateSession::Inline { dataset } => dataset.build()?,
        };
        let (id, dir) = reg.new_session_dir();
        let snap = pipeline::ingest(&dir, &id, &dataset)?;
        let descriptor = snap.descriptor.clone();
        reg.insert(Session::new(dir, snap));
        Ok(descriptor)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(descriptor)))
}

async fn list_sessions(State(reg): State<AppState>) -> Json<Vec<Descriptor>> {
    Json(reg.sessions().iter().map(|s| s.snapshot().descriptor.clone()).collect())
}

async fn get_session(State(reg): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Descriptor>> {
    Ok(Json(reg.session(&id)?.snapshot().descriptor.clone()))
}

async fn sample(State(reg): State<AppState>, Path(id): Path<String>, Json(req): Json<SampleRequest>) -> ApiResult<Json<Descriptor>> {
    let session = reg.session(&id)?;
    let guard = session.begin("sample")?;
    let descriptor = blocking(move || {
        let _guard = guard;
        let next = pipeline::sample(&session.dir, &session.snapshot(), &req)?;
        let descriptor = next.descriptor.clone();
        session.publish(next);
        Ok(descriptor)
    })
    .await?;
    Ok(Json(descriptor))
}

fn accepted(job: Job) -> (StatusCode, Json<Job>) {
    (StatusCode::ACCEPTED, Json(job))
}

async fn map(State(reg): State<AppState>, Path(id): Path<String>, Json(req): Json<MapRequest>) -> ApiResult<(StatusCode, Json<Job>)> {
    let session = reg.session(&id)?;
    session.snapshot().descriptor.require(crate::store::SessionState::Sampled)?;
    let guard = session.begin("map")?;
    let s = session.clone();
    let job = reg.spawn(&id, JobKind::Map, Some(guard), move |monitor| {
        let (next, report) = pipeline::map(&s.dir, &s.snapshot(), &req, monitor)?;
        s.publish(next);
        Ok(serde_json::to_value(report).unwrap_or(Value::Null))
    });
    Ok(accepted(job))
}

async fn propagate(State(reg): State<AppState>, Path(id): Path<String>, Json(input): Json<WeightInput>) -> ApiResult<(StatusCode, Json<Job>)> {
    let session = reg.session(&id)?;
    let snap = session.snapshot();
    snap.descriptor.require(crate::store::SessionState::Mapped)?;
    let w = input.resolve(snap.descriptor.features.len())?;
    let guard = session.begin("propagate")?;
    let s = session.clone();
    let job = reg.spawn(&id, JobKind::Propagate, Some(guard), move |monitor| {
        let next = pipeline::propagate(&s.dir, &s.snapshot(), &w, monitor)?;
        let n = next.descriptor.n;
        s.publish(next);
        Ok(json!({ "alphas": w.alphas(), "n": n, "fused": "fused.fmat" }))
    });
    Ok(accepted(job))
}

async fn get_job(State(reg): State<AppState>, Path(jid): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(reg.job(&jid)?.snapshot()))
}

async fn cancel_job(State(reg): State<AppState>, Path(jid): Path<String>) -> ApiResult<Json<Job>> {
    let job = reg.job(&jid)?;
    job.request_cancel();
    Ok(Json(job.snapshot()))
}

#[derive(Debug, Deserialize)]
struct ViewQuery {
    #[serde(default)]
    view: View,
}

async fn sample_embeddings(
    State(reg): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ViewQuery>,
) -> ApiResult<Json<pipeline::SampleEmbeddings>> {
    let snap = reg.session(&id)?.snapshot();
    Ok(Json(pipeline::sample_embeddings(&snap, q.view)?))
}

async fn weights(State(reg): State<AppState>, Path(id): Path<String>, Json(input): Json<WeightInput>) -> ApiResult<Json<pipeline::Evaluation>> {
    let snap = reg.session(&id)?.snapshot();
    Ok(Json(pipeline::evaluate(&snap, &input)?))
}

#[derive(Debug, Serialize)]
struct ClusterResponse {
    labels: String,
    k: usize,
    bandwidth: f64,
    group_sizes: Vec<usize>,
    assignments: Vec<usize>,
}

async fn cluster(State(reg): State<AppState>, Path(id): Path<String>, Json(req): Json<ClusterRequest>) -> ApiResult<Json<ClusterResponse>> {
    let session = reg.session(&id)?;
    let resp = blocking(move || {
        let c = pipeline::cluster(&session.snapshot(), &req)?;
        let name = format!("clusters_{}.txt", target_name(req.on));
        pipeline::write_clustering(&session.dir, &c, &name)?;
        Ok(ClusterResponse {
            labels: name,
            k: c.k,
            bandwidth: c.bandwidth,
            group_sizes: c.group_sizes(),
            assignments: c.labels,
        })
    })
    .await?;
    Ok(Json(resp))
}

fn target_name(t: Target) -> &'static str {
    match t {
        Target::Sample => "sample",
        Target::Full => "full",
    }
}

#[derive(Debug, Deserialize)]
struct TransitionBody {
    #[serde(flatten)]
    request: TransitionRequest,
    /// Run as a job instead of answering inline.
    #[serde(default, rename = "async")]
    run_async: bool,
}

async fn transitions(State(reg): State<AppState>, Path(id): Path<String>, Json(body): Json<TransitionBody>) -> ApiResult<Response> {
    let session = reg.session(&id)?;
    session.snapshot().descriptor.require_at_least(crate::store::SessionState::Mapped)?;
    let run = move |s: &Session| -> ServiceResult<Value> {
        let t = pipeline::transitions(&s.snapshot(), &body.request)?;
        pipeline::write_transitions(&s.dir, &t)?;
        let retained: Vec<_> = (0..t.flows.len()).map(|i| t.retained(i)).collect();
        Ok(json!({ "transitions": t, "retained": retained, "file": "flows.csv" }))
    };
    if body.run_async {
        let s = session.clone();
        let job = reg.spawn(&id, JobKind::Transitions, None, move |_| run(&s));
        return Ok(accepted(job).into_response());
    }
    let value = blocking(move || run(&session)).await?;
    Ok(Json(value).into_response())
}

#[derive(Debug, Deserialize)]
struct HeatmapQuery {
    #[serde(default)]
    on: Target,
    #[serde(default = "default_heatmap_size")]
    size: usize,
    /// Comma-separated weights; defaults to the propagated or uniform weights.
    #[serde(default)]
    alphas: Option<String>,
}

fn default_heatmap_size() -> usize {
    200
}

pub fn parse_weights(text: &str) -> ServiceResult<WeightVector> {
    let alphas = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| ServiceError::bad(format!("bad weight `{t}`"))))
        .collect::<ServiceResult<Vec<_>>>()?;
    Ok(WeightVector::new(alphas)?)
}

async fn heatmap(
    State(reg): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult<Json<fusionforge_core::analysis::Heatmap>> {
    let session = reg.session(&id)?;
    let h = blocking(move || {
        let snap = session.snapshot();
        let w = match &q.alphas {
            Some(a) => parse_weights(a)?,
            None => pipeline::default_weights(&snap),
        };
        pipeline::heatmap(&snap, &w, q.on, q.size)
    })
    .await?;
    Ok(Json(h))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum BenchRequest {
    LambdaSweep {
        #[serde(default = "default_grid")]
        grid: Vec<f64>,
        #[serde(default = "default_repeats")]
        repeats: usize,
        #[serde(default)]
        seed: u64,
    },
    Nnm {
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default)]
        seed: u64,
    },
}

pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_repeats() -> usize {
    3
}

fn default_draws() -> usize {
    10
}

async fn bench(State(reg): State<AppState>, Path(id): Path<String>, Json(req): Json<BenchRequest>) -> ApiResult<(StatusCode, Json<Job>)> {
    let session = reg.session(&id)?;
    let s = session.clone();
    let job = reg.spawn(&id, JobKind::Bench, None, move |_| {
        let snap = s.snapshot();
        let value = match req {
            BenchRequest::LambdaSweep { grid, repeats, seed } => {
                serde_json::to_value(pipeline::bench_sweep(&snap, &grid, repeats, seed)?)
            }
            BenchRequest::Nnm { draws, seed } => serde_json::to_value(pipeline::bench_nnm(&snap, draws, seed)?),
        };
        value.map_err(|e| ServiceError::Corrupt(e.to_string()))
    });
    Ok(accepted(job))
}

/// Bind and serve until ctrl-c.
pub async fn serve(registry: AppState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
