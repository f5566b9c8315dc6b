//! Routes and handlers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Mutex as AsyncMutex};

use propaseg_core::metrics::{per_slice_dsc, worst_slice_excluding, MetricReport};
use propaseg_core::orchestrator::{Session, SessionConfig, SliceBranch};
use propaseg_core::update::SliceEdit;
use propaseg_core::volume::{
    decode_mask, decode_volume, load_mask, load_volume, make_phantom, slice_extract, Axis, Dims3, MaskVolume,
    PhantomConfig, Spacing, Volume,
};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult, ErrorBody};
use crate::models::{LoadedModel, ModelChecksums, ModelRegistry};
use crate::rle::RleMask;
use crate::store::{now_ms, SessionRecord, SessionStore, StoredEdit};

/// A session held in memory together with its inputs.
pub struct Live {
    pub record: SessionRecord,
    pub session: Session,
    pub volume: Volume,
    pub label: Option<MaskVolume>,
    pub model: Arc<LoadedModel>,
}

type LiveHandle = Arc<AsyncMutex<Live>>;

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done { result: EditResponse },
    Failed { error: ErrorBody },
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: ModelRegistry,
    pub store: SessionStore,
    sessions: RwLock<HashMap<String, LiveHandle>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            models: ModelRegistry::new(config.model_dir.clone()),
            store: SessionStore::new(config.store_dir.clone()),
            config,
            sessions: RwLock::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    fn cached(&self, id: &str) -> Option<LiveHandle> {
        self.sessions.read().expect("session map").get(id).cloned()
    }

    /// In-memory session, restored from the store when absent.
    async fn live(self: &Arc<Self>, id: &str) -> ApiResult<LiveHandle> {
        if let Some(h) = self.cached(id) {
            return Ok(h);
        }
        if !self.store.exists(id) {
            return Err(ApiError::not_found("session_not_found", format!("no session {id:?}")));
        }
        let state = self.clone();
        let owned = id.to_string();
        let live = blocking(move || state.restore(&owned)).await?;
        let mut map = self.sessions.write().expect("session map");
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(AsyncMutex::new(live)))
            .clone())
    }

    fn restore(&self, id: &str) -> ApiResult<Live> {
        let (record, volume, label) = self.store.load(id)?;
        let model = self.models.get(&record.model_id)?;
        let fusion = if record.use_fusion { model.fusion.clone() } else { None };
        let mut session = Session::new(model.seg.clone(), fusion, &volume, record.config.clone())?;
        for e in &record.edits {
            let mask = e
                .mask
                .decode()
                .map_err(|err| ApiError::internal(format!("stored edit for slice {}: {err}", e.slice)))?;
            session.propagate_edit(SliceEdit::new(e.slice, mask))?;
        }
        log::info!("restored session {id} with {} edits", record.edits.len());
        Ok(Live {
            record,
            session,
            volume,
            label,
            model,
        })
    }

    pub fn live_sessions(&self) -> usize {
        self.sessions.read().expect("session map").len()
    }

    /// Drop in-memory state; sessions reload from disk on next access.
    pub fn evict_all(&self) {
        self.sessions.write().expect("session map").clear();
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models/{id}/checksum", get(model_checksum))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/slices", get(get_slice))
        .route("/sessions/{id}/edits", post(submit_edit))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/history", get(get_history))
        .route("/jobs/{id}", get(get_job))
        .with_state(state)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models: Vec<String>,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        models: state.models.available(),
        sessions: state.live_sessions(),
    })
}

async fn model_checksum(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ModelChecksums>> {
    let model = state.models.get(&id)?;
    Ok(Json(blocking(move || Ok(model.checksums())).await?))
}

/// Exactly one volume source must be given. A phantom brings its own label.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    pub model_id: String,
    pub volume_path: Option<String>,
    /// Base64 of a PVOL1 volume file.
    pub volume_pvol: Option<String>,
    pub phantom: Option<PhantomConfig>,
    pub label_path: Option<String>,
    /// Base64 of a PVOL1 mask file.
    pub label_pvol: Option<String>,
    /// Use the model's fusion network when it has one.
    pub use_fusion: Option<bool>,
    /// Defaults to the service defaults with the model's training loss.
    pub config: Option<SessionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub model_id: String,
    pub dims: Dims3,
    pub spacing: Spacing,
    pub channels: usize,
    pub has_label: bool,
    pub has_fusion: bool,
    pub source: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub edited_slices: Vec<usize>,
    pub provenance: Vec<SliceBranch>,
    /// Worst remaining slice against the label, when one is attached.
    pub suggested_slice: Option<usize>,
    pub baseline_dsc: Option<f64>,
    pub refined_dsc: Option<f64>,
}

fn invalid_volume(e: impl std::fmt::Display) -> ApiError {
    ApiError::bad_request("invalid_volume", e.to_string())
}

fn read_source(req: &CreateSession) -> ApiResult<(Volume, Option<MaskVolume>, String)> {
    let sources = [req.volume_path.is_some(), req.volume_pvol.is_some(), req.phantom.is_some()];
    if sources.iter().filter(|s| **s).count() != 1 {
        return Err(invalid_volume("give exactly one of volume_path, volume_pvol, phantom"));
    }
    let (volume, mut label, source) = if let Some(p) = &req.volume_path {
        (load_volume(p).map_err(invalid_volume)?, None, p.clone())
    } else if let Some(b) = &req.volume_pvol {
        let bytes = STANDARD.decode(b).map_err(invalid_volume)?;
        (decode_volume(&bytes).map_err(invalid_volume)?, None, "upload".into())
    } else {
        let cfg = req.phantom.as_ref().expect("checked above");
        let (v, m) = make_phantom(cfg).map_err(invalid_volume)?;
        (v, Some(m), "phantom".into())
    };
    if let Some(p) = &req.label_path {
        label = Some(load_mask(p).map_err(invalid_volume)?);
    } else if let Some(b) = &req.label_pvol {
        let bytes = STANDARD.decode(b).map_err(invalid_volume)?;
        label = Some(decode_mask(&bytes).map_err(invalid_volume)?);
    }
    if let Some(l) = &label {
        if l.dims != volume.dims() {
            return Err(invalid_volume(format!("label dims {:?} differ from volume {:?}", l.dims, volume.dims())));
        }
    }
    Ok((volume, label, source))
}

fn summarize(live: &Live) -> ApiResult<SessionSummary> {
    let s = &live.session;
    let edited: Vec<usize> = s.history().iter().map(|r| r.edit.slice).collect();
    let (suggested, baseline_dsc, refined_dsc) = match &live.label {
        Some(label) => {
            let dsc = |p: &propaseg_core::volume::PredictionVolume| {
                propaseg_core::metrics::dsc(&p.binarize(label.spacing), label)
            };
            (
                worst_slice_excluding(s.refined(), label, &edited).ok(),
                Some(dsc(s.baseline())?),
                Some(dsc(s.refined())?),
            )
        }
        None => (None, None, None),
    };
    Ok(SessionSummary {
        id: live.record.id.clone(),
        model_id: live.record.model_id.clone(),
        dims: live.record.dims,
        spacing: live.record.spacing,
        channels: live.record.channels,
        has_label: live.label.is_some(),
        has_fusion: s.has_fusion(),
        source: live.record.source.clone(),
        created_ms: live.record.created_ms,
        updated_ms: live.record.updated_ms,
        edited_slices: edited,
        provenance: s.provenance().to_vec(),
        suggested_slice: suggested,
        baseline_dsc,
        refined_dsc,
    })
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionSummary>)> {
    let model = state.models.get(&req.model_id)?;
    let st = state.clone();
    let live = blocking(move || {
        let (volume, label, source) = read_source(&req)?;
        model.seg.check_dims(volume.dims()).map_err(invalid_volume)?;
        if volume.shape.c != model.seg.config.in_channels {
            return Err(invalid_volume(format!(
                "model expects {} channels, volume has {}",
                model.seg.config.in_channels, volume.shape.c
            )));
        }
        let use_fusion = req.use_fusion.unwrap_or(true) && model.fusion.is_some();
        let fusion = if use_fusion { model.fusion.clone() } else { None };
        if let Some(f) = &fusion {
            let tap = model.seg.tap_shape(volume.dims())?;
            if f.tap_shape != tap {
                return Err(invalid_volume(format!(
                    "fusion network expects activations {:?}, this volume gives {:?}; pass use_fusion=false",
                    f.tap_shape, tap
                )));
            }
        }
        let config = req.config.clone().unwrap_or_else(|| {
            let mut c = SessionConfig::default();
            c.update.loss = model.manifest.loss;
            c
        });
        let session = Session::new(model.seg.clone(), fusion, &volume, config.clone())?;
        let now = now_ms();
        let record = SessionRecord {
            id: uuid::Uuid::new_v4().simple().to_string(),
            model_id: model.id.clone(),
            use_fusion,
            config,
            dims: volume.dims(),
            spacing: volume.spacing,
            channels: volume.shape.c,
            has_label: label.is_some(),
            source,
            created_ms: now,
            updated_ms: now,
            edits: Vec::new(),
        };
        st.store.create(&record, &volume, label.as_ref())?;
        Ok(Live {
            record,
            session,
            volume,
            label,
            model,
        })
    })
    .await?;
    let summary = summarize(&live)?;
    log::info!("created session {} on model {}", summary.id, summary.model_id);
    state
        .sessions
        .write()
        .expect("session map")
        .insert(summary.id.clone(), Arc::new(AsyncMutex::new(live)));
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let live = state.live(&id).await?;
    let guard = live.lock().await;
    Ok(Json(summarize(&guard)?))
}

#[derive(Clone, Debug, Deserialize)]
pub struct SliceQuery {
    pub variant: String,
    pub axis: String,
    pub index: usize,
    pub channel: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub variant: String,
    pub axis: Axis,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major; probabilities for predictions, 0/1 for the label.
    pub data: Vec<f32>,
}

async fn get_slice(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<SliceResponse>> {
    let axis: Axis = q
        .axis
        .parse()
        .map_err(|_| ApiError::bad_request("invalid_axis", format!("unknown axis {:?}", q.axis)))?;
    let live = state.live(&id).await?;
    let guard = live.lock().await;
    let dims = guard.record.dims;
    let plane = match q.variant.as_str() {
        "image" => {
            let c = q.channel.unwrap_or(0);
            if c >= guard.volume.shape.c {
                return Err(ApiError::bad_request(
                    "out_of_range",
                    format!("channel {c} out of range for {} channels", guard.volume.shape.c),
                ));
            }
            slice_extract(guard.volume.channel(c), dims, axis, q.index)?
        }
        "baseline" => slice_extract(&guard.session.baseline().prob, dims, axis, q.index)?,
        "refined" => slice_extract(&guard.session.refined().prob, dims, axis, q.index)?,
        "label" => {
            let label = guard
                .label
                .as_ref()
                .ok_or_else(|| ApiError::not_found("no_label", "session has no label attached"))?;
            let p = slice_extract(&label.data, dims, axis, q.index)?;
            propaseg_core::volume::Plane {
                rows: p.rows,
                cols: p.cols,
                data: p.data.iter().map(|&v| v as u8 as f32).collect(),
            }
        }
        other => {
            return Err(ApiError::bad_request(
                "invalid_variant",
                format!("variant {other:?} is not image, baseline, refined or label"),
            ))
        }
    };
    Ok(Json(SliceResponse {
        variant: q.variant,
        axis,
        index: q.index,
        rows: plane.rows,
        cols: plane.cols,
        data: plane.data,
    }))
}

/// One axial edit: an explicit mask, or `simulate` to take the label slice.
#[derive(Clone, Debug, Deserialize)]
pub struct EditItem {
    pub slice: usize,
    #[serde(default)]
    pub mask: Option<RleMask>,
    #[serde(default)]
    pub simulate: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum EditRequest {
    Batch { edits: Vec<EditItem> },
    Single(EditItem),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub edited_slices: Vec<usize>,
    pub history_len: usize,
    /// Branch that produced each axial slice; covers every slice once.
    pub provenance: Vec<SliceBranch>,
    pub neighborhood: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub fell_back: bool,
    pub per_slice_dsc: Option<Vec<f64>>,
    pub baseline_dsc: Option<f64>,
    pub dsc: Option<f64>,
    pub suggested_slice: Option<usize>,
    pub elapsed_ms: u64,
}

fn resolve_edit(item: &EditItem, dims: Dims3, label: Option<&MaskVolume>) -> ApiResult<SliceEdit> {
    if item.slice >= dims.d {
        return Err(ApiError::bad_request(
            "out_of_range",
            format!("slice {} out of range for depth {}", item.slice, dims.d),
        ));
    }
    let mask = match (&item.mask, item.simulate) {
        (Some(_), true) => {
            return Err(ApiError::bad_request("invalid_request", "give either mask or simulate, not both"))
        }
        (None, true) => label
            .ok_or_else(|| ApiError::bad_request("no_label", "simulated edits need a label"))?
            .axial(item.slice)
            .to_vec(),
        (Some(m), false) => {
            if (m.h, m.w) != (dims.h, dims.w) {
                return Err(ApiError::bad_request(
                    "malformed_rle",
                    format!("mask is {}x{}, slices are {}x{}", m.h, m.w, dims.h, dims.w),
                ));
            }
            m.decode().map_err(|e| ApiError::bad_request("malformed_rle", e.0))?
        }
        (None, false) => return Err(ApiError::bad_request("invalid_request", "edit needs a mask or simulate")),
    };
    Ok(SliceEdit::new(item.slice, mask))
}

/// Apply on a copy and commit only on success, so a rejected edit leaves
/// no trace.
fn apply_edits(store: &SessionStore, live: &mut Live, items: &[EditItem]) -> ApiResult<EditResponse> {
    let start = Instant::now();
    if items.is_empty() {
        return Err(ApiError::bad_request("invalid_request", "no edits given"));
    }
    let dims = live.record.dims;
    let edits = items
        .iter()
        .map(|i| resolve_edit(i, dims, live.label.as_ref()))
        .collect::<ApiResult<Vec<_>>>()?;
    let mut session = live.session.clone();
    session.apply_edit_sequence(edits.clone())?;
    let mut record = live.record.clone();
    record.edits.extend(edits.iter().map(|e| StoredEdit {
        slice: e.slice,
        mask: RleMask::encode(&e.mask, dims.h, dims.w),
    }));
    record.updated_ms = now_ms();
    store.save_state(&record)?;
    live.session = session;
    live.record = record;

    let s = &live.session;
    let last = s.history().last().expect("at least one edit applied");
    let edited: Vec<usize> = s.history().iter().map(|r| r.edit.slice).collect();
    let (per_slice, baseline_dsc, dsc, suggested) = match &live.label {
        Some(label) => {
            let refined = s.refined().binarize(label.spacing);
            (
                Some(per_slice_dsc(&refined, label)?),
                Some(propaseg_core::metrics::dsc(&s.baseline().binarize(label.spacing), label)?),
                Some(propaseg_core::metrics::dsc(&refined, label)?),
                worst_slice_excluding(s.refined(), label, &edited).ok(),
            )
        }
        None => (None, None, None, None),
    };
    Ok(EditResponse {
        edited_slices: edits.iter().map(|e| e.slice).collect(),
        history_len: s.history().len(),
        provenance: s.provenance().to_vec(),
        neighborhood: last.neighborhood.clone(),
        iterations: last.trace.iterations,
        converged: last.trace.converged,
        fell_back: last.fell_back,
        per_slice_dsc: per_slice,
        baseline_dsc,
        dsc,
        suggested_slice: suggested,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PendingJob {
    pub job_id: String,
    pub status: String,
}

async fn submit_edit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<EditRequest>,
) -> ApiResult<Response> {
    let live = state.live(&id).await?;
    let items = match req {
        EditRequest::Batch { edits } => edits,
        EditRequest::Single(item) => vec![item],
    };
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    state
        .jobs
        .lock()
        .expect("job map")
        .insert(job_id.clone(), JobStatus::Pending);
    let (tx, rx) = oneshot::channel();
    let st = state.clone();
    let jid = job_id.clone();
    tokio::spawn(async move {
        let mut guard = live.lock_owned().await;
        let store = st.store.clone();
        let result = blocking(move || apply_edits(&store, &mut guard, &items)).await;
        let status = match &result {
            Ok(r) => JobStatus::Done { result: r.clone() },
            Err(e) => JobStatus::Failed { error: e.body() },
        };
        st.jobs.lock().expect("job map").insert(jid, status);
        let _ = tx.send(result);
    });
    let timeout = Duration::from_secs_f64(state.config.timeout_secs);
    match tokio::time::timeout(timeout, rx).await {
        Ok(Ok(result)) => {
            state.jobs.lock().expect("job map").remove(&job_id);
            Ok(Json(result?).into_response())
        }
        Ok(Err(_)) => Err(ApiError::internal("edit worker dropped")),
        Err(_) => Ok((
            StatusCode::ACCEPTED,
            Json(PendingJob {
                job_id,
                status: "pending".into(),
            }),
        )
            .into_response()),
    }
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    state
        .jobs
        .lock()
        .expect("job map")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job_not_found", format!("no job {id:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub baseline: MetricReport,
    pub refined: MetricReport,
    pub edited_slices: Vec<usize>,
    pub suggested_slice: Option<usize>,
}

async fn get_metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<MetricsResponse>> {
    let live = state.live(&id).await?;
    let guard = live.lock_owned().await;
    let out = blocking(move || {
        let label = guard
            .label
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no_label", "session has no label attached"))?;
        let s = &guard.session;
        let edited: Vec<usize> = s.history().iter().map(|r| r.edit.slice).collect();
        Ok(MetricsResponse {
            baseline: MetricReport::compute(&s.baseline().binarize(label.spacing), label)?,
            refined: MetricReport::compute(&s.refined().binarize(label.spacing), label)?,
            suggested_slice: worst_slice_excluding(s.refined(), label, &edited).ok(),
            edited_slices: edited,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub index: usize,
    pub slice: usize,
    pub neighborhood: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub fell_back: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub provenance: Vec<SliceBranch>,
}

async fn get_history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<HistoryEntry>>> {
    let live = state.live(&id).await?;
    let guard = live.lock().await;
    Ok(Json(
        guard
            .session
            .history()
            .iter()
            .enumerate()
            .map(|(i, r)| HistoryEntry {
                index: i,
                slice: r.edit.slice,
                neighborhood: r.neighborhood.clone(),
                iterations: r.trace.iterations,
                converged: r.trace.converged,
                diverged: r.trace.diverged,
                fell_back: r.fell_back,
                initial_loss: Some(r.trace.initial_loss()).filter(|v| v.is_finite()),
                final_loss: Some(r.trace.final_loss()).filter(|v| v.is_finite()),
                provenance: r.provenance.clone(),
            })
            .collect(),
    ))
}
