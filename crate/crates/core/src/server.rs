//! JSON API over a completed run directory.
//!
//! Everything except the label store is read-only. Label posts are appended
//! to a jsonl file under a single lock; the store version is the number of
//! records appended so far.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::evalharness::{self, Bucket, LabelCategory, LabelRecord};
use crate::report;
use crate::rundir::{default_thetas, RunData};

const DEFAULT_QUEUE_SIZE: usize = 50;
const DEFAULT_BIN_WIDTH: f64 = 0.25;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

struct LabelStore {
    path: PathBuf,
    records: Vec<LabelRecord>,
}

impl LabelStore {
    fn open(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LabelRecord = serde_json::from_str(&line).map_err(|e| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
                })?;
                records.push(record);
            }
        }
        Ok(LabelStore { path: path.to_path_buf(), records })
    }

    fn version(&self) -> usize {
        self.records.len()
    }

    fn append(&mut self, record: LabelRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.records.push(record);
        Ok(())
    }

    fn resolved(&self) -> BTreeMap<String, LabelCategory> {
        evalharness::resolve_labels(&evalharness::dedup_last_wins(self.records.iter().cloned()))
    }
}

pub struct AppState {
    run: RunData,
    seed: u64,
    labels: Mutex<LabelStore>,
}

impl AppState {
    pub fn open(run_dir: &Path, labels: &Path, seed: u64) -> Result<Arc<Self>, Box<dyn std::error::Error + Send + Sync>> {
        let run = RunData::load(run_dir)?;
        Ok(Self::from_run(run, labels, seed)?)
    }

    pub fn from_run(run: RunData, labels: &Path, seed: u64) -> std::io::Result<Arc<Self>> {
        let labels = Mutex::new(LabelStore::open(labels)?);
        Ok(Arc::new(AppState { run, seed, labels }))
    }

    fn resolved_labels(&self) -> (usize, BTreeMap<String, LabelCategory>) {
        let store = self.labels.lock().unwrap_or_else(|p| p.into_inner());
        (store.version(), store.resolved())
    }

    fn composition_at(&self, theta: f64) -> Value {
        let (version, resolved) = self.resolved_labels();
        match evalharness::composition(&resolved, &self.run.manifest.decisions, theta) {
            Ok(table) => json!({ "version": version, "labeled": resolved.len(), "composition": table }),
            Err(e) => json!({ "version": version, "labeled": resolved.len(), "composition": null, "unavailable": e.to_string() }),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/histogram", get(histogram))
        .route("/api/sweep", get(sweep))
        .route("/api/threshold-preview", get(threshold_preview))
        .route("/api/queue", get(queue))
        .route("/api/composition", get(composition))
        .route("/api/labels", get(list_labels).post(post_label))
        .with_state(state)
}

type Params = Query<HashMap<String, String>>;

fn parse_param<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError>
where
    T::Err: std::fmt::Display,
{
    params
        .get(key)
        .map(|v| v.parse::<T>().map_err(|e| ApiError::bad_request(format!("invalid {key} {v:?}: {e}"))))
        .transpose()
}

fn parse_theta(params: &HashMap<String, String>, key: &str) -> Result<Option<f64>, ApiError> {
    match parse_param::<f64>(params, key)? {
        Some(t) if !t.is_finite() => Err(ApiError::bad_request(format!("{key} must be finite"))),
        other => Ok(other),
    }
}

async fn histogram(State(state): State<Arc<AppState>>, Query(params): Params) -> ApiResult {
    let selector = params.get("trigger").map(String::as_str).unwrap_or("max");
    let width = parse_param::<f64>(&params, "width")?.unwrap_or(DEFAULT_BIN_WIDTH);
    let scores = state
        .run
        .selected_scores(selector)
        .ok_or_else(|| ApiError::bad_request(format!("unknown trigger {selector:?}")))?;
    let hist = report::histogram(&scores, width, selector).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!(hist)))
}

async fn sweep(State(state): State<Arc<AppState>>, Query(params): Params) -> ApiResult {
    let thetas = match params.get("thetas") {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| ApiError::bad_request(format!("invalid theta {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => default_thetas(state.run.manifest.threshold()),
    };
    let rows = report::threshold_sweep(&state.run.manifest.doc_scores(), &thetas).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(json!(rows)))
}

async fn threshold_preview(State(state): State<Arc<AppState>>, Query(params): Params) -> ApiResult {
    let theta = parse_theta(&params, "theta")?.unwrap_or_else(|| state.run.manifest.threshold());
    let rows = report::threshold_sweep(&state.run.manifest.doc_scores(), &[theta]).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let row = &rows[0];
    let mut body = state.composition_at(theta);
    body["theta"] = json!(theta);
    body["removed"] = json!(row.removed);
    body["total"] = json!(row.total);
    body["removal_fraction"] = json!(row.removal_fraction);
    Ok(Json(body))
}

async fn queue(State(state): State<Arc<AppState>>, Query(params): Params) -> ApiResult {
    let buckets = match parse_param::<Bucket>(&params, "bucket")? {
        Some(b) => vec![b],
        None => Bucket::ALL.to_vec(),
    };
    let seed = parse_param::<u64>(&params, "seed")?.unwrap_or(state.seed);
    let n = parse_param::<usize>(&params, "n")?.unwrap_or(DEFAULT_QUEUE_SIZE);
    let theta = parse_theta(&params, "theta")?.unwrap_or_else(|| state.run.manifest.threshold());
    let mut set = evalharness::sample_buckets(&state.run.manifest.decisions, theta, &buckets, n, seed)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    for item in &mut set.items {
        item.excerpt = state.run.excerpts.get(&item.doc_id).cloned();
    }
    Ok(Json(json!(set)))
}

async fn composition(State(state): State<Arc<AppState>>) -> ApiResult {
    let theta = state.run.manifest.threshold();
    let mut body = state.composition_at(theta);
    body["theta"] = json!(theta);
    Ok(Json(body))
}

async fn list_labels(State(state): State<Arc<AppState>>) -> ApiResult {
    let store = state.labels.lock().unwrap_or_else(|p| p.into_inner());
    Ok(Json(json!({ "version": store.version(), "records": store.records })))
}

#[derive(Deserialize)]
struct LabelPost {
    doc_id: String,
    annotator_id: String,
    category: String,
    #[serde(default)]
    timestamp: Option<String>,
    /// Store version the client last saw; a mismatch is a conflict.
    #[serde(default)]
    base_version: Option<usize>,
}

async fn post_label(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let post: LabelPost = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid label record: {e}")))?;
    let category = post.category.parse::<LabelCategory>().map_err(|e| ApiError::bad_request(e.to_string()))?;
    if post.annotator_id.trim().is_empty() {
        return Err(ApiError::bad_request("annotator_id must not be empty"));
    }
    if !state.run.manifest.decisions.iter().any(|d| d.doc_id == post.doc_id) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown document {:?}", post.doc_id)));
    }
    let mut store = state.labels.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(base) = post.base_version {
        if base != store.version() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("label store is at version {}, request was based on {base}", store.version()),
            ));
        }
    }
    let record = LabelRecord { doc_id: post.doc_id, annotator_id: post.annotator_id, category, timestamp: post.timestamp };
    store.append(record.clone()).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({ "version": store.version(), "record": record }))))
}
