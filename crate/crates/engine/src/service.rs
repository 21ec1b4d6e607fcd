//! JSON-over-HTTP API for review tools and scripts. Handlers only translate
//! between HTTP and the engine; every rule lives in the orchestrator.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use bikelane_core::domain::{scenario_catalog, LaneDescription, SceneMeta, SceneSource, StreetScene};
use bikelane_core::workflow::{CheckpointStage, Decision, PipelineRun, ReviseTarget, RunState, TransitionError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::imaging::decode_image;
use crate::ingest::{self, IngestError, IngestSettings, Location, QcStore, StreetViewSource};
use crate::orchestrator::{CandidateView, CheckpointInput, Engine, EngineError, Payload, PromptRecord, RunOverrides};
use crate::report::{self, ReportError};

/// Shared handler state.
pub struct AppState {
    pub engine: Engine,
    pub qc: QcStore,
    pub source: Box<dyn StreetViewSource>,
    pub ingest: IngestSettings,
    pub token: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl ApiError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        let status = match code {
            "not_found" => StatusCode::NOT_FOUND,
            "illegal_transition" => StatusCode::CONFLICT,
            "validation" => StatusCode::BAD_REQUEST,
            "provider_failure" => StatusCode::BAD_GATEWAY,
            "unauthorized" => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            code,
            message: message.into(),
            stage: None,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new("validation", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::NotFound(_) => Self::new("not_found", message),
            EngineError::Transition(TransitionError::NotAdvanced(_) | TransitionError::EditUnchanged) => {
                Self::validation(message)
            }
            EngineError::Transition(_) | EngineError::NotExecutable(_) | EngineError::VersionConflict { .. } => {
                Self::new("illegal_transition", message)
            }
            EngineError::Validation(_) | EngineError::Config(_) => Self::validation(message),
            EngineError::Stage { stage, provider, .. } => {
                let mut err = Self::new(if provider { "provider_failure" } else { "validation" }, message);
                err.stage = Some(stage.to_string());
                err
            }
            EngineError::Integrity(_) | EngineError::Store(_) => Self::new("integrity", message),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let code = match e.code() {
            "already_decided" => "illegal_transition",
            "no_imagery" | "not_found" => "not_found",
            "unknown_scene" | "validation" => "validation",
            "provider_failure" => "provider_failure",
            _ => "integrity",
        };
        Self::new(code, e.to_string())
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Store(s) => EngineError::from(s).into(),
            other => Self::validation(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new("integrity", format!("worker failed: {e}")))?
}

fn image_url(run_id: &str, hash: &str) -> String {
    format!("/runs/{run_id}/images/{hash}")
}

/// Run projection served to clients.
#[derive(Debug, Serialize)]
pub struct RunView {
    pub run_id: String,
    pub version: u64,
    pub state: RunState,
    pub checkpoint: Option<CheckpointStage>,
    pub round: u32,
    pub max_rounds: u32,
    pub scene_id: String,
    pub scenario_id: u8,
    pub awaiting_revise_target: bool,
    pub last_error: Option<String>,
    /// Live artifact name to URL (images) or content hash (other files).
    pub artifacts: BTreeMap<String, String>,
    pub lane_description: Option<LaneDescription>,
    pub prompt: Option<PromptRecord>,
    pub run: PipelineRun,
}

fn run_view(engine: &Engine, run: PipelineRun) -> ApiResult<RunView> {
    let artifacts = run
        .live_artifacts()
        .map(|(name, hash)| {
            let v = if name.ends_with(".png") {
                image_url(run.run_id(), hash)
            } else {
                hash.clone()
            };
            (name.clone(), v)
        })
        .collect();
    Ok(RunView {
        run_id: run.run_id().to_string(),
        version: run.version,
        state: run.state,
        checkpoint: run.state.checkpoint(),
        round: run.round,
        max_rounds: run.header.max_rounds,
        scene_id: run.header.scene_id.clone(),
        scenario_id: run.header.scenario_id,
        awaiting_revise_target: run.awaiting_revise_target,
        last_error: run.last_error.clone(),
        artifacts,
        lane_description: engine.lane_description(&run)?,
        prompt: engine.prompt_record(&run)?,
        run,
    })
}

#[derive(Debug, Deserialize)]
pub struct PngBody {
    pub png_base64: String,
}

fn decode_png(body: &PngBody) -> ApiResult<bikelane_core::Raster> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(body.png_base64.trim())
        .map_err(|e| ApiError::validation(format!("png_base64: {e}")))?;
    decode_image(&bytes).map_err(|e| ApiError::validation(format!("image: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    /// Scene previously saved under the configured scenes directory.
    pub scene_id: Option<String>,
    /// Inline scene image; `meta` describes it.
    pub scene: Option<PngBody>,
    pub meta: Option<SceneMeta>,
    pub scenario: u8,
    pub pool_size: Option<u32>,
    pub seed: Option<u64>,
    pub user_prompt: Option<String>,
    /// Execute stages until a checkpoint needs a decision.
    #[serde(default)]
    pub drive: bool,
}

async fn create_run(State(state): State<Arc<AppState>>, Json(body): Json<CreateRun>) -> ApiResult<Response> {
    blocking(&state, move |s| {
        let scene = match (&body.scene_id, &body.scene) {
            (Some(id), None) => {
                if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                    return Err(ApiError::validation("invalid scene id"));
                }
                let path = s.engine.config().ingest.scenes_dir.join(format!("{id}.png"));
                if !path.is_file() {
                    return Err(ApiError::new("not_found", format!("scene {id} not found")));
                }
                ingest::load_scene(&path)?
            }
            (None, Some(png)) => {
                let image = decode_png(png)?;
                let meta = body.meta.clone().unwrap_or_else(|| SceneMeta {
                    scene_id: crate::imaging::raster_hash(&image)[..16].to_string(),
                    latitude: 0.0,
                    longitude: 0.0,
                    heading: 0.0,
                    pitch: 0.0,
                    fov: 90.0,
                    width: image.width(),
                    height: image.height(),
                    source: SceneSource::LocalFile,
                });
                StreetScene { meta, image }
            }
            _ => return Err(ApiError::validation("give exactly one of scene_id or scene")),
        };
        let overrides = RunOverrides {
            pool_size: body.pool_size,
            seed: body.seed,
            user_prompt: body.user_prompt.clone(),
        };
        let (mut run, created) = s.engine.create_run(&scene, body.scenario, &overrides)?;
        if body.drive {
            run = s.engine.drive(run.run_id())?;
        }
        let status = if created { StatusCode::CREATED } else { StatusCode::OK };
        Ok((status, Json(run_view(&s.engine, run)?)).into_response())
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct RunFilter {
    pub scene_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub version: u64,
    pub state: RunState,
    pub scene_id: String,
    pub scenario_id: u8,
    pub final_selection: Option<String>,
    pub final_image_url: Option<String>,
}

async fn list_runs(
    State(state): State<Arc<AppState>>,
    Query(filter): Query<RunFilter>,
) -> ApiResult<Json<Vec<RunSummary>>> {
    blocking(&state, move |s| {
        let mut out = Vec::new();
        for id in s.engine.list()? {
            let run = s.engine.get(&id)?;
            if filter.scene_id.as_ref().is_some_and(|f| f != &run.header.scene_id) {
                continue;
            }
            let final_image_url = run
                .final_selection
                .as_ref()
                .and_then(|c| run.artifacts.get(&crate::orchestrator::candidate_file(c)))
                .map(|h| image_url(&id, h));
            out.push(RunSummary {
                run_id: id,
                version: run.version,
                state: run.state,
                scene_id: run.header.scene_id.clone(),
                scenario_id: run.header.scenario_id,
                final_selection: run.final_selection.clone(),
                final_image_url,
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<RunView>> {
    blocking(&state, move |s| {
        let run = s.engine.get(&id)?;
        Ok(Json(run_view(&s.engine, run)?))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvanceBody {
    pub expected_version: Option<u64>,
    /// Keep executing until a checkpoint, a terminal state or a failure.
    #[serde(default)]
    pub drive: bool,
}

async fn advance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<AdvanceBody>>,
) -> ApiResult<Json<RunView>> {
    let body = body.map(|b| b.0).unwrap_or_default();
    blocking(&state, move |s| {
        let mut run = s.engine.execute_stage(&id, body.expected_version)?;
        if body.drive {
            run = s.engine.drive(&id)?;
        }
        Ok(Json(run_view(&s.engine, run)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointBody {
    pub decision: Decision,
    #[serde(default)]
    pub editor: Option<String>,
    pub expected_version: Option<u64>,
    /// Edited content: a lane description object, prompt text, or
    /// `{"png_base64": ...}` for the highlight.
    pub payload: Option<Value>,
}

fn parse_payload(stage: CheckpointStage, v: Value) -> ApiResult<Payload> {
    let bad = |e: serde_json::Error| ApiError::validation(format!("payload: {e}"));
    Ok(match stage {
        CheckpointStage::Description => {
            Payload::Description(serde_json::from_value::<LaneDescription>(v).map_err(bad)?)
        }
        CheckpointStage::Prompt => Payload::Prompt(serde_json::from_value::<String>(v).map_err(bad)?),
        CheckpointStage::Highlight => Payload::Highlight(decode_png(&serde_json::from_value(v).map_err(bad)?)?),
        CheckpointStage::Selection => return Err(ApiError::validation("selection decisions go to /expert-pick")),
    })
}

async fn checkpoint(
    State(state): State<Arc<AppState>>,
    Path((id, stage)): Path<(String, String)>,
    Json(body): Json<CheckpointBody>,
) -> ApiResult<Json<RunView>> {
    let stage = CheckpointStage::parse(&stage)
        .ok_or_else(|| ApiError::new("not_found", format!("unknown checkpoint stage {stage}")))?;
    blocking(&state, move |s| {
        let payload = body.payload.map(|p| parse_payload(stage, p)).transpose()?;
        let input = CheckpointInput {
            stage,
            decision: body.decision,
            editor: body.editor.unwrap_or_else(|| "reviewer".into()),
            payload,
        };
        let run = s.engine.checkpoint(&id, input, body.expected_version)?;
        Ok(Json(run_view(&s.engine, run)?))
    })
    .await
}

#[derive(Debug, Serialize)]
pub struct CandidateEntry {
    #[serde(flatten)]
    pub candidate: CandidateView,
    pub image_url: String,
}

async fn candidates(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(&state, move |s| {
        let run = s.engine.get(&id)?;
        let list: Vec<CandidateEntry> = s
            .engine
            .candidates(&run)?
            .into_iter()
            .map(|c| CandidateEntry {
                image_url: image_url(&id, &c.sha256),
                candidate: c,
            })
            .collect();
        Ok(Json(json!({
            "run_id": id,
            "version": run.version,
            "round": run.round,
            "advanced": run.advanced,
            "agent_selection": run.agent_selection,
            "candidates": list,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertPickBody {
    /// The expert's own choice; null when no advanced candidate is acceptable.
    #[serde(default)]
    pub candidate_id: Option<String>,
    /// Stage to revise when the expert disagrees with the agent.
    pub revise: Option<ReviseTarget>,
    pub editor: Option<String>,
    pub expected_version: Option<u64>,
    /// Send only `revise` (no pick) for a run already awaiting a revise target.
    #[serde(default)]
    pub revise_only: bool,
}

async fn expert_pick(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ExpertPickBody>,
) -> ApiResult<Json<RunView>> {
    blocking(&state, move |s| {
        let mut expected = body.expected_version;
        let mut run = None;
        if !body.revise_only {
            let editor = body.editor.as_deref().unwrap_or("expert");
            let r = s.engine.expert_pick(&id, body.candidate_id.clone(), editor, expected)?;
            expected = Some(r.version);
            run = Some(r);
        }
        let needs_revise = run.as_ref().is_none_or(|r| r.state != RunState::Finalized);
        if let (Some(target), true) = (body.revise, needs_revise) {
            run = Some(s.engine.revise(&id, target, expected)?);
        }
        let run = match run {
            Some(r) => r,
            None => return Err(ApiError::validation("revise_only needs a revise target")),
        };
        Ok(Json(run_view(&s.engine, run)?))
    })
    .await
}

async fn image(State(state): State<Arc<AppState>>, Path((id, hash)): Path<(String, String)>) -> ApiResult<Response> {
    blocking(&state, move |s| {
        let run = s.engine.get(&id)?;
        let bytes = s.engine.image_by_hash(&run, &hash)?;
        let mut resp = bytes.into_response();
        let h = resp.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        h.insert(
            header::CACHE_CONTROL,
            HeaderValue::from_static("public, max-age=31536000, immutable"),
        );
        if let Ok(etag) = HeaderValue::from_str(&format!("\"{hash}\"")) {
            h.insert(header::ETAG, etag);
        }
        Ok(resp)
    })
    .await
}

async fn scenarios() -> Json<Value> {
    Json(json!(scenario_catalog()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestBody {
    pub locations: Vec<Location>,
    pub headings: Option<Vec<f64>>,
    pub size: Option<u32>,
}

async fn ingest_locations(State(state): State<Arc<AppState>>, Json(body): Json<IngestBody>) -> ApiResult<Json<Value>> {
    blocking(&state, move |s| {
        if body.locations.is_empty() {
            return Err(ApiError::validation("locations are empty"));
        }
        let mut settings = s.ingest.clone();
        if let Some(h) = body.headings {
            settings.headings = h;
        }
        if let Some(size) = body.size {
            settings.size = size;
        }
        let cfg = s.engine.config();
        let summary = ingest::ingest_locations(
            s.source.as_ref(),
            &body.locations,
            &settings,
            cfg.default_retry().map_err(EngineError::from)?,
            &crate::providers::ThreadSleeper,
            &cfg.ingest.scenes_dir,
            &s.qc,
        );
        Ok(Json(json!(summary)))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct QcFilter {
    #[serde(default)]
    pub pending: bool,
}

async fn qc_items(State(state): State<Arc<AppState>>, Query(filter): Query<QcFilter>) -> ApiResult<Json<Value>> {
    blocking(&state, move |s| {
        let items: Vec<_> =
            s.qc.items()?
                .into_iter()
                .filter(|i| !filter.pending || i.chosen.is_none())
                .collect();
        Ok(Json(json!(items)))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceBody {
    pub scene_id: String,
    pub reviewer: String,
}

async fn qc_choice(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ChoiceBody>,
) -> ApiResult<Json<Value>> {
    blocking(&state, move |s| {
        let item = s.qc.record_choice(&id, &body.scene_id, &body.reviewer)?;
        Ok(Json(json!(item)))
    })
    .await
}

async fn accuracy(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    blocking(&state, move |s| {
        let cfg = s.engine.config();
        let labels = cfg
            .service
            .labels
            .as_ref()
            .ok_or_else(|| ApiError::new("not_found", "no gold-label file configured (service.labels)"))?;
        let report = report::report_from_paths(labels, &cfg.pipeline.runs_dir)?;
        Ok(Json(json!(report)))
    })
    .await
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new("unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/advance", post(advance))
        .route("/runs/{id}/checkpoints/{stage}", post(checkpoint))
        .route("/runs/{id}/candidates", get(candidates))
        .route("/runs/{id}/expert-pick", post(expert_pick))
        .route("/runs/{id}/images/{hash}", get(image))
        .route("/scenarios", get(scenarios))
        .route("/ingest", post(ingest_locations))
        .route("/qc", get(qc_items))
        .route("/qc/{id}/choice", post(qc_choice))
        .route("/reports/accuracy", get(accuracy))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
