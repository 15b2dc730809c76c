//! Read-only JSON API over a fixed set of loaded runs.
//!
//! Projections and Con-score reports are memoized per request key. Two
//! requests racing on the same key both compute; the first insert wins and
//! both values are identical, so the cache never changes a response.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use conscope_core::conscore::{compute_report, ConScoreError, ConScoreOptions};
use conscope_core::dataio::{Checkpoint, CovariateColumn, CovariateKind, Task};
use conscope_core::reduce::{pca_fit, view_from_projection, Projection};
use conscope_core::LoadedRun;
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

/// Upper bound on `permutations` accepted over HTTP.
pub const MAX_PERMUTATIONS: usize = 100_000;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": message }))).into_response()
    }
}

impl From<ConScoreError> for ApiError {
    fn from(e: ConScoreError) -> Self {
        match e {
            ConScoreError::UnknownCheckpoint(_) | ConScoreError::UnknownCovariate(_) => {
                ApiError::NotFound(e.to_string())
            }
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

type ProjectionKey = (String, String, usize);
type ReportKey = (String, String, String);

pub struct AppState {
    runs: Vec<LoadedRun>,
    index: HashMap<String, usize>,
    projections: Mutex<HashMap<ProjectionKey, Arc<Projection>>>,
    reports: Mutex<HashMap<ReportKey, Arc<String>>>,
}

impl AppState {
    /// Fails on an empty run list or duplicate run ids.
    pub fn new(runs: Vec<LoadedRun>) -> Result<AppState, String> {
        if runs.is_empty() {
            return Err("no runs to serve".into());
        }
        let mut index = HashMap::new();
        for (i, run) in runs.iter().enumerate() {
            if index.insert(run.meta.run_id.clone(), i).is_some() {
                return Err(format!("duplicate run_id '{}'", run.meta.run_id));
            }
        }
        Ok(AppState {
            runs,
            index,
            projections: Mutex::new(HashMap::new()),
            reports: Mutex::new(HashMap::new()),
        })
    }

    pub fn runs(&self) -> &[LoadedRun] {
        &self.runs
    }

    fn run(&self, id: &str) -> Result<&LoadedRun, ApiError> {
        self.index
            .get(id)
            .map(|&i| &self.runs[i])
            .ok_or_else(|| ApiError::NotFound(format!("unknown run '{id}'")))
    }

    pub fn cached_reports(&self) -> usize {
        self.reports.lock().unwrap().len()
    }

    pub fn cached_projections(&self) -> usize {
        self.projections.lock().unwrap().len()
    }
}

fn checkpoint<'a>(run: &'a LoadedRun, label: Option<&str>) -> Result<&'a Checkpoint, ApiError> {
    match label {
        None => Ok(run.last_checkpoint()),
        Some(l) => run
            .checkpoint(l)
            .ok_or_else(|| ApiError::NotFound(format!("unknown checkpoint '{l}'"))),
    }
}

fn parse<T: std::str::FromStr>(
    q: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, ApiError> {
    q.get(key)
        .map(|raw| {
            raw.parse()
                .map_err(|_| ApiError::BadRequest(format!("invalid value for '{key}': '{raw}'")))
        })
        .transpose()
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/meta", get(default_meta))
        .route("/api/runs/{id}/meta", get(run_meta))
        .route("/api/runs/{id}/points", get(points))
        .route("/api/runs/{id}/covariates/{name}", get(covariate))
        .route("/api/runs/{id}/conscores", get(conscores))
        .with_state(state);
    let api = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::NotFound("no such endpoint".into()) }),
    };
    api.layer(CorsLayer::permissive())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: &'a str,
    task: Task,
    n: usize,
    d: usize,
    checkpoints: &'a [String],
    covariates: Vec<&'a str>,
}

fn summary(run: &LoadedRun) -> RunSummary<'_> {
    RunSummary {
        run_id: &run.meta.run_id,
        task: run.meta.task,
        n: run.meta.n,
        d: run.meta.d,
        checkpoints: &run.meta.checkpoints,
        covariates: run
            .meta
            .covariates
            .iter()
            .map(|c| c.name.as_str())
            .collect(),
    }
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(state.runs.iter().map(summary).collect::<Vec<_>>()))
}

async fn default_meta(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(state.runs[0].meta))
}

async fn run_meta(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    Ok(Json(json!(state.run(&id)?.meta)))
}

async fn points(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let run = state.run(&id)?;
    let ckpt = checkpoint(run, q.get("checkpoint").map(String::as_str))?;
    let dims: usize = parse(&q, "dims")?.unwrap_or(2);
    if !(dims == 2 || dims == 3) {
        return Err(ApiError::BadRequest(format!(
            "dims must be 2 or 3, got {dims}"
        )));
    }
    if dims > run.meta.d {
        return Err(ApiError::BadRequest(format!(
            "dims={dims} exceeds representation dimension {}",
            run.meta.d
        )));
    }
    let label = ckpt.label().to_string();
    let key = (id.clone(), label.clone(), dims);

    let cached = state.projections.lock().unwrap().get(&key).cloned();
    let body = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || -> Result<Value, ApiError> {
            let run = state.run(&id)?;
            let ckpt = checkpoint(run, Some(&label))?;
            let h = &ckpt.representations.values;
            let projection = match cached {
                Some(p) => p,
                None => {
                    let p = Arc::new(
                        pca_fit(h, dims).map_err(|e| ApiError::BadRequest(e.to_string()))?,
                    );
                    state
                        .projections
                        .lock()
                        .unwrap()
                        .entry(key)
                        .or_insert(p)
                        .clone()
                }
            };
            let view = view_from_projection(&label, &projection, h, &ckpt.final_layer.weights)
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            let y_pred: Vec<f64> = match run.meta.task {
                Task::BinaryClassification => run
                    .labels
                    .y_score
                    .iter()
                    .map(|&s| if s >= 0.5 { 1.0 } else { 0.0 })
                    .collect(),
                Task::Regression => run.labels.y_score.clone(),
            };
            Ok(json!({
                "run_id": run.meta.run_id,
                "checkpoint": view.checkpoint,
                "dims": dims,
                "sample_ids": run.labels.sample_ids,
                "coords": view.coords,
                "y_true": run.labels.y_true,
                "y_pred": y_pred,
                "boundary_normal": view.boundary_normal,
                "explained_ratio": view.explained_ratio,
                "approximate": view.approximate,
                "warning": view.warning,
            }))
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??
    };
    Ok(Json(body))
}

async fn covariate(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ApiError> {
    let run = state.run(&id)?;
    checkpoint(run, q.get("checkpoint").map(String::as_str))?;
    let (desc, column) = run
        .covariate(&name)
        .ok_or_else(|| ApiError::NotFound(format!("unknown covariate '{name}'")))?;
    let values: Vec<Value> = match column {
        CovariateColumn::Continuous(v) => v.iter().map(|x| json!(x)).collect(),
        CovariateColumn::Categorical(v) => {
            let cats = desc.categories();
            v.iter().map(|x| json!(x.map(|c| &cats[c]))).collect()
        }
    };
    let mut body = json!({
        "run_id": run.meta.run_id,
        "name": desc.name,
        "kind": desc.kind,
        "sample_ids": run.covariates.sample_ids,
        "values": values,
    });
    if desc.kind == CovariateKind::Categorical {
        body["categories"] = json!(desc.categories());
    }
    Ok(Json(body))
}

fn options_from_query(q: &HashMap<String, String>) -> Result<ConScoreOptions, ApiError> {
    let mut options = ConScoreOptions::default();
    if let Some(raw) = q.get("permutations") {
        let n: i64 = raw.parse().map_err(|_| {
            ApiError::BadRequest(format!("invalid value for 'permutations': '{raw}'"))
        })?;
        if n < 0 || n as usize > MAX_PERMUTATIONS {
            return Err(ApiError::BadRequest(format!(
                "permutations must be between 0 and {MAX_PERMUTATIONS}, got {n}"
            )));
        }
        options.permutations = n as usize;
    }
    if let Some(seed) = parse(q, "seed")? {
        options.seed = seed;
    }
    if let Some(r) = parse::<f64>(q, "ridge_ols")? {
        if !(r.is_finite() && r >= 0.0) {
            return Err(ApiError::BadRequest(
                "ridge_ols must be finite and >= 0".into(),
            ));
        }
        options.ridge_ols = Some(r);
    }
    if let Some(r) = parse::<f64>(q, "ridge_logistic")? {
        if !(r.is_finite() && r > 0.0) {
            return Err(ApiError::BadRequest(
                "ridge_logistic must be finite and > 0".into(),
            ));
        }
        options.ridge_logistic = r;
    }
    Ok(options)
}

async fn conscores(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let run = state.run(&id)?;
    let label = checkpoint(run, q.get("checkpoint").map(String::as_str))?
        .label()
        .to_string();
    let options = options_from_query(&q)?;
    let key = (id.clone(), label.clone(), format!("{options:?}"));

    let cached = state.reports.lock().unwrap().get(&key).cloned();
    let body = match cached {
        Some(body) => body,
        None => {
            let state = state.clone();
            tokio::task::spawn_blocking(move || -> Result<Arc<String>, ApiError> {
                let run = state.run(&id)?;
                let report = compute_report(run, Some(&label), None, &options)?;
                let body = Arc::new(report.to_json());
                Ok(state
                    .reports
                    .lock()
                    .unwrap()
                    .entry(key)
                    .or_insert(body)
                    .clone())
            })
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??
        }
    };
    Ok((
        [(header::CONTENT_TYPE, "application/json")],
        body.as_str().to_owned(),
    )
        .into_response())
}

/// Serves `router` on an already-bound listener until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
