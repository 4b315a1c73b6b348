//! HTTP editing service.
//!
//! Loaded models are immutable shared state behind `Arc`; compute runs on the blocking
//! pool. The only write is `/api/direction`, which appends to the direction store
//! under a lock.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Result};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use crg_core::editing::{histogram_csv, k_range, AttributeAnalysis, AttributeDirection, DEFAULT_HISTOGRAM_BINS};
use crg_core::image::ImageTensor;
use crg_core::models::LatentVector;
use crg_core::synthdata::Dataset;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ops::{load_direction, load_workspace_dataset, save_direction, LoadedPair};
use crate::workspace::{MissingArtifact, ModelPairInfo, Workspace};

pub const DEFAULT_SWEEP_POINTS: usize = 21;

/// Error body: `{"error": message, "id": correlation id (server errors only)}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        if e.downcast_ref::<MissingArtifact>().is_some() {
            return Self { status: StatusCode::NOT_FOUND, message: e.to_string() };
        }
        let core = e.chain().find_map(|c| c.downcast_ref::<crg_core::Error>());
        use crg_core::Error as E;
        match core {
            Some(
                E::Shape(_)
                | E::DegeneratePair
                | E::DegenerateAverage(_)
                | E::Orientation { .. }
                | E::InvalidValue(_)
                | E::Config(_)
                | E::Empty(_),
            ) => Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: format!("{e:#}") },
            _ => Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: format!("{e:#}") },
        }
    }
}

impl From<crg_core::Error> for ApiError {
    fn from(e: crg_core::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status == StatusCode::INTERNAL_SERVER_ERROR {
            let id = format!("{:016x}", rand::random::<u64>());
            tracing::error!(%id, error = %self.message, "request failed");
            return (self.status, Json(json!({ "error": "internal error", "id": id }))).into_response();
        }
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct Projection {
    dataset: String,
    analysis: AttributeAnalysis,
}

pub struct AppState {
    ws: Workspace,
    dataset: Option<String>,
    pairs: Mutex<HashMap<String, Arc<LoadedPair>>>,
    projections: Mutex<HashMap<(String, String), Arc<Projection>>>,
    direction_store: Mutex<()>,
}

impl AppState {
    /// `dataset` is the labelled set projection statistics are computed on; without it
    /// the only dataset at the model's resolution is used.
    pub fn new(ws: Workspace, dataset: Option<String>) -> Self {
        Self {
            ws,
            dataset,
            pairs: Mutex::new(HashMap::new()),
            projections: Mutex::new(HashMap::new()),
            direction_store: Mutex::new(()),
        }
    }

    fn pair(&self, model: Option<&str>) -> Result<Arc<LoadedPair>> {
        let info = self.ws.model_pair(model)?;
        let mut cache = self.pairs.lock().expect("pair cache poisoned");
        if let Some(p) = cache.get(&info.id) {
            return Ok(p.clone());
        }
        let id = info.id.clone();
        let loaded = Arc::new(LoadedPair::load(&self.ws, info)?);
        cache.insert(id, loaded.clone());
        Ok(loaded)
    }

    fn direction(&self, id: &str) -> Result<(String, AttributeDirection)> {
        load_direction(&self.ws, id)
    }

    /// Model named in the request, else the direction's own model, else the only pair.
    fn pair_for_direction(&self, model: Option<&str>, d: &AttributeDirection) -> Result<Arc<LoadedPair>> {
        self.pair(model.or(d.model.as_deref()))
    }

    fn analysis_dataset(&self, pair: &ModelPairInfo) -> Result<(String, Dataset)> {
        if let Some(r) = &self.dataset {
            return load_workspace_dataset(&self.ws, r);
        }
        let mut found = Vec::new();
        for entry in std::fs::read_dir(self.ws.datasets())? {
            let dir = entry?.path();
            let Ok(bytes) = std::fs::read(dir.join("manifest.json")) else { continue };
            let Ok(m) = serde_json::from_slice::<crg_core::synthdata::DatasetManifest>(&bytes) else { continue };
            let attributed = m.records.iter().filter(|r| r.attributed).count();
            if m.resolution == pair.resolution && attributed > 1 && attributed + 1 < m.records.len() {
                found.push(dir);
            }
        }
        found.sort();
        match found.len() {
            1 => load_workspace_dataset(&self.ws, &found[0].display().to_string()),
            0 => Err(anyhow::Error::new(MissingArtifact(format!(
                "no labelled {}px dataset for projection statistics",
                pair.resolution
            )))),
            n => Err(crg_core::Error::Config(format!(
                "{n} candidate datasets for projection statistics; start the service with --dataset"
            ))
            .into()),
        }
    }

    fn projection(&self, pair: &LoadedPair, direction_id: &str, d: &AttributeDirection) -> Result<Arc<Projection>> {
        let key = (pair.info.id.clone(), direction_id.to_string());
        if let Some(p) = self.projections.lock().expect("projection cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let (dataset, ds) = self.analysis_dataset(&pair.info)?;
        let analysis = pair.analyze(&ds, d, DEFAULT_HISTOGRAM_BINS)?;
        let p = Arc::new(Projection { dataset, analysis });
        self.projections.lock().expect("projection cache poisoned").insert(key, p.clone());
        Ok(p)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/models", get(models))
        .route("/api/encode", post(encode))
        .route("/api/direction", post(direction))
        .route("/api/edit", post(edit))
        .route("/api/sweep", post(sweep))
        .route("/api/projection-stats", get(projection_stats))
        .route("/api/k-range", get(k_range_handler))
        .with_state(state)
}

/// Bind and serve until interrupted.
pub fn serve_blocking(ws: Workspace, bind: &str, dataset: Option<String>) -> Result<()> {
    let pairs = ws.model_pairs()?;
    if pairs.is_empty() {
        return Err(anyhow::Error::new(MissingArtifact("no trained encoder/generator pair to serve".into())));
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        tracing::info!(addr = %listener.local_addr()?, models = pairs.len(), "serving");
        let app = router(Arc::new(AppState::new(ws, dataset)));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::from(anyhow!("worker failed: {e}")))?
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T>(q: std::result::Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn decode_png(field: &str, b64: &str) -> ApiResult<ImageTensor> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))?;
    ImageTensor::from_png(&bytes).map_err(|e| ApiError::bad_request(format!("{field}: {e}")))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Source latent given directly or as an image to encode.
fn source_latent(pair: &LoadedPair, z: Option<Vec<f64>>, image: Option<String>) -> ApiResult<LatentVector> {
    match (z, image) {
        (Some(z), None) => {
            let z = LatentVector::new(z).map_err(|e| ApiError::bad_request(format!("z: {e}")))?;
            pair.check_latent(&z)?;
            Ok(z)
        }
        (None, Some(img)) => Ok(pair.encode(&decode_png("image", &img)?)?),
        _ => Err(ApiError::bad_request("exactly one of 'z' and 'image' is required")),
    }
}

async fn models(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<ModelPairInfo>>> {
    blocking(move || Ok(Json(s.ws.model_pairs()?))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    model: Option<String>,
    image: String,
}

async fn encode(State(s): State<Arc<AppState>>, payload: std::result::Result<Json<EncodeRequest>, JsonRejection>) -> ApiResult<Json<Value>> {
    let req = body(payload)?;
    blocking(move || {
        let img = decode_png("image", &req.image)?;
        let pair = s.pair(req.model.as_deref())?;
        let z = pair.encode(&img)?;
        Ok(Json(json!({ "model": pair.info.id, "z": z.as_slice() })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectionRequest {
    model: Option<String>,
    neutral_image: String,
    attributed_image: String,
    /// Attribute tag; also prefixes the direction id.
    name: Option<String>,
}

#[derive(Serialize)]
struct DirectionResponse {
    direction_id: String,
    model: String,
    attribute: String,
    raw: Vec<f64>,
    unit: Vec<f64>,
    created: bool,
}

async fn direction(
    State(s): State<Arc<AppState>>,
    payload: std::result::Result<Json<DirectionRequest>, JsonRejection>,
) -> ApiResult<Json<DirectionResponse>> {
    let req = body(payload)?;
    blocking(move || {
        let neutral = decode_png("neutral_image", &req.neutral_image)?;
        let attributed = decode_png("attributed_image", &req.attributed_image)?;
        let pair = s.pair(req.model.as_deref())?;
        let name = req.name.unwrap_or_else(|| "direction".into());
        let d = pair.direction(&[neutral], &[attributed], &name, &["request".to_string()])?;
        let (id, written) = {
            let _guard = s.direction_store.lock().expect("direction lock poisoned");
            save_direction(&s.ws, &d)?
        };
        Ok(Json(DirectionResponse {
            direction_id: id,
            model: pair.info.id.clone(),
            attribute: d.attribute.clone(),
            raw: d.raw.as_slice().to_vec(),
            unit: d.unit.as_slice().to_vec(),
            created: written == crate::workspace::Written::Created,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditItem {
    direction_id: String,
    k: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    model: Option<String>,
    z: Option<Vec<f64>>,
    image: Option<String>,
    direction_id: Option<String>,
    k: Option<f64>,
    /// Several edits applied in order; replaces `direction_id`/`k`.
    edits: Option<Vec<EditItem>>,
    #[serde(default)]
    use_unit: bool,
}

async fn edit(State(s): State<Arc<AppState>>, payload: std::result::Result<Json<EditRequest>, JsonRejection>) -> ApiResult<Response> {
    let req = body(payload)?;
    let items = match (req.edits, req.direction_id, req.k) {
        (Some(items), None, None) if !items.is_empty() => items,
        (None, Some(direction_id), Some(k)) => vec![EditItem { direction_id, k }],
        _ => return Err(ApiError::bad_request("give either 'direction_id' with 'k', or a non-empty 'edits' list")),
    };
    blocking(move || {
        let directions = items.iter().map(|it| s.direction(&it.direction_id)).collect::<Result<Vec<_>>>()?;
        let pair = s.pair_for_direction(req.model.as_deref(), &directions[0].1)?;
        let z = source_latent(&pair, req.z, req.image)?;
        let edits: Vec<_> = directions.iter().map(|(_, d)| d).zip(items.iter().map(|it| it.k)).collect();
        let z_edit = pair.apply_edits(&z, &edits, req.use_unit)?;
        Ok(png_response(pair.render(&z_edit)?.to_png()?))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRequest {
    model: Option<String>,
    z: Option<Vec<f64>>,
    image: Option<String>,
    direction_id: String,
    /// Explicit strengths; otherwise evenly spaced over the safe range.
    k_list: Option<Vec<f64>>,
    points: Option<usize>,
    #[serde(default)]
    use_unit: bool,
}

async fn sweep(State(s): State<Arc<AppState>>, payload: std::result::Result<Json<SweepRequest>, JsonRejection>) -> ApiResult<Json<Value>> {
    let req = body(payload)?;
    if req.k_list.as_ref().is_some_and(|k| k.is_empty()) {
        return Err(ApiError::bad_request("'k_list' is empty"));
    }
    blocking(move || {
        let (id, d) = s.direction(&req.direction_id)?;
        let pair = s.pair_for_direction(req.model.as_deref(), &d)?;
        let z = source_latent(&pair, req.z, req.image)?;
        let ks = match req.k_list {
            Some(ks) => ks,
            None => {
                let points = req.points.unwrap_or(DEFAULT_SWEEP_POINTS).max(2);
                let p = s.projection(&pair, &id, &d)?;
                let (lo, hi) = k_range(&z, &d, &p.analysis.stats, req.use_unit)?;
                (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
            }
        };
        let zs = ks.iter().map(|&k| pair.apply_edits(&z, &[(&d, k)], req.use_unit)).collect::<Result<Vec<_>>>()?;
        let images = pair
            .render_many(&zs)?
            .iter()
            .map(|img| Ok(B64.encode(img.to_png()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Json(json!({ "direction_id": id, "model": pair.info.id, "k": ks, "images": images })))
    })
    .await
}

#[derive(Deserialize)]
struct StatsQuery {
    direction_id: String,
    model: Option<String>,
}

async fn projection_stats(
    State(s): State<Arc<AppState>>,
    q: std::result::Result<Query<StatsQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    blocking(move || {
        let (id, d) = s.direction(&q.direction_id)?;
        let pair = s.pair_for_direction(q.model.as_deref(), &d)?;
        let p = s.projection(&pair, &id, &d)?;
        let stats = &p.analysis.stats;
        Ok(Json(json!({
            "direction_id": id,
            "model": pair.info.id,
            "dataset": p.dataset,
            "stats": stats,
            "band": stats.band(),
            "histogram": p.analysis.histogram,
            "histogram_csv": histogram_csv(&p.analysis.histogram)?,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct KRangeQuery {
    direction_id: String,
    /// Comma-separated components, optionally wrapped in brackets.
    z: String,
    model: Option<String>,
    #[serde(default)]
    use_unit: bool,
}

fn parse_latent(text: &str) -> ApiResult<LatentVector> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let values = inner
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| ApiError::bad_request(format!("z: {e}")))?;
    LatentVector::new(values).map_err(|e| ApiError::bad_request(format!("z: {e}")))
}

async fn k_range_handler(
    State(s): State<Arc<AppState>>,
    q: std::result::Result<Query<KRangeQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let z = parse_latent(&q.z)?;
    blocking(move || {
        let (id, d) = s.direction(&q.direction_id)?;
        let pair = s.pair_for_direction(q.model.as_deref(), &d)?;
        pair.check_latent(&z)?;
        pair.check_direction(&d)?;
        let p = s.projection(&pair, &id, &d)?;
        let (k_lo, k_hi) = k_range(&z, &d, &p.analysis.stats, q.use_unit)?;
        Ok(Json(json!({ "k_lo": k_lo, "k_hi": k_hi })))
    })
    .await
}
