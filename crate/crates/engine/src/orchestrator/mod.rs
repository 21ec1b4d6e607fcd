//! Run lifecycle: creation, stage execution, checkpoints, expert review and
//! persistence of every run version under the runs directory.

pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use bikelane_core::domain::{
    scenario, validate_scene, CandidateDesign, CandidateMeta, CandidateStage, DesignScenario, LaneDescription,
    OptimizedPrompt, StreetScene, Verdict,
};
use bikelane_core::evaluate::{Disposition, VerdictMode};
use bikelane_core::lane::compose_generation_prompt;
use bikelane_core::workflow::{
    CheckpointRecord, CheckpointStage, Decision, Event, PipelineRun, ReviseTarget, RunHeader, RunState, TransitionError,
};
use bikelane_core::{Raster, Rgb};
use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentError};
use crate::config::{CascadeInput, CheckpointMode, Config, ConfigError};
use crate::evaluator::{self, EvalError, EvalReport, EvalSettings};
use crate::imaging::{decode_image, encode_mask_png, encode_png, raster_hash, sha256_hex};
use crate::providers::{Capability, ProviderError, Providers};
use crate::synth;
use crate::templates::{AssetError, TemplateSet};

pub use store::{RunStore, StoreError};

pub const SCENE_PNG: &str = "scene.png";
pub const SCENE_JSON: &str = "scene.json";
pub const LOCATOR_JSON: &str = "locator.json";
pub const PROMPT_TXT: &str = "prompt.txt";
pub const PROMPT_JSON: &str = "prompt.json";
pub const HIGHLIGHT_PNG: &str = "highlight.png";
pub const EVAL_JSON: &str = "eval.json";
pub const AUTO_EDITOR: &str = "auto";

pub fn candidate_file(id: &str) -> String {
    format!("candidates/{id}.png")
}

pub fn mask_file(id: &str) -> String {
    format!("masks/{id}.png")
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("run {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("run is in state {0:?}; no stage to execute")]
    NotExecutable(RunState),
    #[error("run is at version {actual}, request expected {expected}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("{0}")]
    Validation(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
        /// True when a model provider caused the failure.
        provider: bool,
    },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => EngineError::NotFound(id),
            other => EngineError::Store(other),
        }
    }
}

impl From<AssetError> for EngineError {
    fn from(e: AssetError) -> Self {
        EngineError::Validation(e.to_string())
    }
}

fn validation(msg: impl Into<String>) -> EngineError {
    EngineError::Validation(msg.into())
}

/// Settings fixed when a run is created and stored in its header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub pool_size: u32,
    pub top_k: usize,
    pub seed: u64,
    pub highlight_color: String,
    pub mask_fill: [u8; 3],
    pub verdict_mode: VerdictMode,
    pub cascade_input: CascadeInput,
    pub user_prompt: String,
    pub exemplar_set: String,
    pub optimizer_model: Option<String>,
    pub absence_phrases: Vec<String>,
    /// Template hashes and provider models in effect at creation.
    pub provenance: BTreeMap<String, String>,
}

impl RunParams {
    fn to_map(&self) -> BTreeMap<String, String> {
        let serde_json::Value::Object(obj) = serde_json::to_value(self).expect("params serialize") else {
            unreachable!()
        };
        obj.into_iter().map(|(k, v)| (k, v.to_string())).collect()
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self, EngineError> {
        let mut obj = serde_json::Map::new();
        for (k, v) in map {
            let value = serde_json::from_str(v).map_err(|e| EngineError::Integrity(format!("run param {k}: {e}")))?;
            obj.insert(k.clone(), value);
        }
        serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| EngineError::Integrity(format!("run params: {e}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub pool_size: Option<u32>,
    pub seed: Option<u64>,
    pub user_prompt: Option<String>,
}

/// Contents of `prompt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub optimized: OptimizedPrompt,
    /// Optimized prompt + lane description + highlight statement.
    pub final_prompt: String,
    pub edited: bool,
}

/// A human edit submitted at a checkpoint.
#[derive(Debug, Clone)]
pub enum Payload {
    Description(LaneDescription),
    Prompt(String),
    Highlight(Raster),
}

#[derive(Debug, Clone)]
pub struct CheckpointInput {
    pub stage: CheckpointStage,
    pub decision: Decision,
    pub editor: String,
    pub payload: Option<Payload>,
}

/// Candidate listing entry for review surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub candidate_id: String,
    pub sha256: String,
    pub rank: Option<usize>,
    pub similarity: Option<f64>,
    pub empty_mask: bool,
    pub advanced: bool,
    pub agent_selected: bool,
    pub expert_pick: bool,
    pub verdict: Verdict,
    pub verdict_flagged: bool,
}

pub type Clock = Arc<dyn Fn() -> String + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
}

fn stage_artifact(stage: CheckpointStage) -> Option<&'static str> {
    match stage {
        CheckpointStage::Description => Some(LOCATOR_JSON),
        CheckpointStage::Prompt => Some(PROMPT_TXT),
        CheckpointStage::Highlight => Some(HIGHLIGHT_PNG),
        CheckpointStage::Selection => None,
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("artifact serializes");
    out.push(b'\n');
    out
}

struct StageFailure {
    message: String,
    provider: bool,
}

impl From<AgentError> for StageFailure {
    fn from(e: AgentError) -> Self {
        let provider = matches!(
            e,
            AgentError::Provider(_) | AgentError::PartialPool { .. } | AgentError::EmptyOptimization
        );
        Self {
            message: e.to_string(),
            provider,
        }
    }
}

impl From<EvalError> for StageFailure {
    fn from(e: EvalError) -> Self {
        let provider = matches!(e, EvalError::Reference(_) | EvalError::Judge { .. });
        Self {
            message: e.to_string(),
            provider,
        }
    }
}

impl From<ProviderError> for StageFailure {
    fn from(e: ProviderError) -> Self {
        Self {
            message: e.to_string(),
            provider: true,
        }
    }
}

impl From<EngineError> for StageFailure {
    fn from(e: EngineError) -> Self {
        Self {
            message: e.to_string(),
            provider: false,
        }
    }
}

struct RunContext {
    params: RunParams,
    scenario: DesignScenario,
    scene: Raster,
}

/// Runs pipelines against one runs directory. Mutations of a run are
/// serialized; different runs proceed concurrently.
pub struct Engine {
    config: Config,
    providers: Providers,
    templates: TemplateSet,
    store: RunStore,
    clock: Clock,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Engine {
    pub fn new(config: Config, providers: Providers) -> Result<Self, EngineError> {
        let templates = match &config.pipeline.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir, &config.pipeline.exemplar_set)?,
            None if config.pipeline.exemplar_set == "default" => TemplateSet::builtin(),
            None => {
                return Err(validation(format!(
                    "exemplar set {:?} needs pipeline.templates_dir",
                    config.pipeline.exemplar_set
                )))
            }
        };
        Ok(Self {
            store: RunStore::new(config.pipeline.runs_dir.clone()),
            config,
            providers,
            templates,
            clock: system_clock(),
            locks: Mutex::new(HashMap::new()),
        })
    }

    /// Providers built from the config, mocks configured from its `[mock]` table.
    pub fn from_config(config: Config) -> Result<Self, EngineError> {
        let providers = config.build_providers(&config.mock_suite()?)?;
        Self::new(config, providers)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn now(&self) -> String {
        (self.clock)()
    }

    fn run_lock(&self, run_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(run_id.to_string()).or_default().clone()
    }

    /// Loads the run under its writer lock and applies `f`.
    fn mutate<T>(
        &self,
        run_id: &str,
        expected_version: Option<u64>,
        f: impl FnOnce(PipelineRun) -> Result<T, EngineError>,
    ) -> Result<T, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let run = self.store.load(run_id)?;
        check_version(&run, expected_version)?;
        f(run)
    }

    pub fn get(&self, run_id: &str) -> Result<PipelineRun, EngineError> {
        Ok(self.store.load(run_id)?)
    }

    pub fn list(&self) -> Result<Vec<String>, EngineError> {
        Ok(self.store.list()?)
    }

    fn commit(
        &self,
        run: &PipelineRun,
        event: Event,
        files: Vec<(String, Vec<u8>)>,
    ) -> Result<PipelineRun, EngineError> {
        let artifacts = files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect();
        let (next, entry) = run.advance(event, artifacts, self.now())?;
        self.store.commit(run.run_id(), &entry, &files)?;
        Ok(next)
    }

    pub fn run_params(&self, overrides: &RunOverrides) -> Result<RunParams, EngineError> {
        let p = &self.config.pipeline;
        let pool_size = overrides.pool_size.unwrap_or(p.pool_size);
        if !(agents::MIN_POOL..=agents::MAX_POOL).contains(&pool_size) {
            return Err(validation(format!(
                "pool size must be in {}..={}, got {pool_size}",
                agents::MIN_POOL,
                agents::MAX_POOL
            )));
        }
        let user_prompt = overrides.user_prompt.clone().unwrap_or_else(|| p.user_prompt.clone());
        if user_prompt.trim().is_empty() {
            return Err(validation("user prompt is empty"));
        }
        let mut provenance: BTreeMap<String, String> = self.templates.hashes().iter().cloned().collect();
        for cap in Capability::ALL {
            let pc = self.config.providers.get(cap);
            let kind = serde_json::to_value(pc.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string));
            provenance.insert(format!("provider.{}", cap.as_str()), kind.unwrap_or_default());
            if let Some(m) = &pc.model {
                provenance.insert(format!("model.{}", cap.as_str()), m.clone());
            }
        }
        Ok(RunParams {
            pool_size,
            top_k: p.top_k,
            seed: overrides.seed.unwrap_or(p.seed),
            highlight_color: p.highlight_color.clone(),
            mask_fill: p.mask_fill,
            verdict_mode: p.verdict_mode()?,
            cascade_input: p.cascade_input,
            user_prompt,
            exemplar_set: self.templates.exemplars.exemplar_set_id.clone(),
            optimizer_model: p.optimizer_model.clone(),
            absence_phrases: p.absence_phrases.clone(),
            provenance,
        })
    }

    /// Creates a run in `Created`. Identical inputs map to the same run id;
    /// the second return value is false when that run already existed.
    pub fn create_run(
        &self,
        scene: &StreetScene,
        scenario_id: u8,
        overrides: &RunOverrides,
    ) -> Result<(PipelineRun, bool), EngineError> {
        let scen =
            scenario(scenario_id).ok_or_else(|| validation(format!("scenario must be in 1..=8, got {scenario_id}")))?;
        validate_scene(scene).map_err(|e| validation(format!("scene: {e}")))?;
        if scene.meta.scene_id.trim().is_empty() {
            return Err(validation("scene id is empty"));
        }
        let params = self.run_params(overrides)?;
        let max_rounds = self.config.pipeline.max_rounds;
        let identity = serde_json::json!({
            "scene": raster_hash(&scene.image),
            "meta": scene.meta,
            "scenario": scen.scenario_id,
            "max_rounds": max_rounds,
            "params": params,
        });
        let run_id = sha256_hex(identity.to_string().as_bytes())[..16].to_string();

        let lock = self.run_lock(&run_id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        if self.store.exists(&run_id) {
            return Ok((self.store.load(&run_id)?, false));
        }
        let files = vec![
            (SCENE_PNG.to_string(), encode_png(&scene.image)),
            (SCENE_JSON.to_string(), pretty_json(&scene.meta)),
        ];
        let artifacts = files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect();
        let header = RunHeader {
            run_id: run_id.clone(),
            scene_id: scene.meta.scene_id.clone(),
            scenario_id: scen.scenario_id,
            max_rounds,
            params: params.to_map(),
        };
        let (run, entry) = PipelineRun::create(header, artifacts, self.now());
        self.store.commit(&run_id, &entry, &files)?;
        Ok((run, true))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, run: &PipelineRun, name: &str) -> Result<T, EngineError> {
        let bytes = self.store.read_artifact(run.run_id(), name)?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::Integrity(format!("{name}: {e}")))
    }

    fn read_image(&self, run: &PipelineRun, name: &str) -> Result<Raster, EngineError> {
        let bytes = self.store.read_artifact(run.run_id(), name)?;
        decode_image(&bytes).map_err(|e| EngineError::Integrity(format!("{name}: {e}")))
    }

    fn context(&self, run: &PipelineRun) -> Result<RunContext, EngineError> {
        let params = RunParams::from_map(&run.header.params)?;
        for (name, hash) in self.templates.hashes() {
            if params.provenance.get(name).is_some_and(|h| h != hash) {
                return Err(validation(format!("{name} changed since the run was created")));
            }
        }
        let scenario = scenario(run.header.scenario_id)
            .ok_or_else(|| EngineError::Integrity(format!("unknown scenario {}", run.header.scenario_id)))?;
        Ok(RunContext {
            params,
            scenario,
            scene: self.read_image(run, SCENE_PNG)?,
        })
    }

    /// Reference design image for a scenario: `<references_dir>/ds<n>.png`
    /// when configured, otherwise the built-in synthetic reference.
    pub fn reference_image(&self, scenario: &DesignScenario) -> Result<Raster, EngineError> {
        match &self.config.pipeline.references_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.png", scenario.reference_image_id));
                let bytes = std::fs::read(&path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
                decode_image(&bytes).map_err(|e| validation(format!("{}: {e}", path.display())))
            }
            None => Ok(synth::reference_design(scenario, 256)),
        }
    }

    /// Runs the agent for the current executable state. An errored run is
    /// resumed first, so only the failed stage is retried.
    pub fn execute_stage(&self, run_id: &str, expected_version: Option<u64>) -> Result<PipelineRun, EngineError> {
        self.mutate(run_id, expected_version, |run| self.execute_locked(run))
    }

    fn execute_locked(&self, run: PipelineRun) -> Result<PipelineRun, EngineError> {
        let run = if run.state == RunState::Errored {
            self.commit(&run, Event::Resume, Vec::new())?
        } else {
            run
        };
        let stage = match run.state {
            RunState::Created => "locate",
            RunState::DescriptionApproved => "optimize_prompt",
            RunState::PromptApproved => "highlight",
            RunState::HighlightApproved => "generate_pool",
            RunState::PoolGenerated => "evaluate",
            RunState::Evaluated => "select",
            other => return Err(EngineError::NotExecutable(other)),
        };
        match self.stage_output(&run) {
            Ok(steps) => {
                let mut run = run;
                for (event, files) in steps {
                    run = self.commit(&run, event, files)?;
                }
                Ok(run)
            }
            Err(f) => {
                self.commit(
                    &run,
                    Event::Fail {
                        stage: stage.into(),
                        message: f.message.clone(),
                    },
                    Vec::new(),
                )?;
                Err(EngineError::Stage {
                    stage,
                    message: f.message,
                    provider: f.provider,
                })
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn stage_output(&self, run: &PipelineRun) -> Result<Vec<(Event, Vec<(String, Vec<u8>)>)>, StageFailure> {
        if run.state == RunState::Evaluated {
            let event = match run.disposition {
                Some(Disposition::Regenerate) => Event::Regenerate,
                _ => Event::AwaitExpert,
            };
            return Ok(vec![(event, Vec::new())]);
        }
        let ctx = self.context(run)?;
        let p = &self.providers;
        let t = &self.templates;
        Ok(match run.state {
            RunState::Created => {
                let meta: bikelane_core::SceneMeta = self.read_json(run, SCENE_JSON)?;
                let phrases: Vec<&str> = ctx.params.absence_phrases.iter().map(String::as_str).collect();
                let scene = StreetScene { meta, image: ctx.scene };
                let lane = agents::locate_lane(p, t, &scene, &phrases)?;
                let mut steps = vec![(Event::Locate, vec![(LOCATOR_JSON.to_string(), pretty_json(&lane))])];
                if !lane.present {
                    steps.push((Event::Exclude, Vec::new()));
                }
                steps
            }
            RunState::DescriptionApproved => {
                let lane: LaneDescription = self.read_json(run, LOCATOR_JSON)?;
                let optimized = agents::optimize_prompt(
                    p,
                    t,
                    &ctx.params.user_prompt,
                    &ctx.scenario,
                    &t.exemplars,
                    ctx.params.optimizer_model.as_deref(),
                )?;
                vec![(Event::OptimizePrompt, prompt_files(optimized, &lane, false)?)]
            }
            RunState::PromptApproved => {
                let lane: LaneDescription = self.read_json(run, LOCATOR_JSON)?;
                let highlight = agents::generate_highlight(
                    p,
                    t,
                    run.run_id(),
                    &ctx.scene,
                    &lane,
                    &ctx.params.highlight_color,
                    ctx.params.seed,
                )?;
                vec![(
                    Event::Highlight,
                    vec![(HIGHLIGHT_PNG.to_string(), encode_png(&highlight.image))],
                )]
            }
            RunState::HighlightApproved => {
                let highlight_hash = run
                    .artifacts
                    .get(HIGHLIGHT_PNG)
                    .cloned()
                    .ok_or_else(|| EngineError::Integrity("no highlight artifact".into()))?;
                let highlight = CandidateDesign {
                    meta: CandidateMeta {
                        candidate_id: agents::HIGHLIGHT_ID.into(),
                        run_id: run.run_id().into(),
                        stage: CandidateStage::Highlight,
                        parent: None,
                        prompt_hash: String::new(),
                        similarity: None,
                        verdict: Verdict::Pending,
                    },
                    image: self.read_image(run, HIGHLIGHT_PNG)?,
                    mask: None,
                };
                let prompt: PromptRecord = self.read_json(run, PROMPT_JSON)?;
                let (extra, primary) = match ctx.params.cascade_input {
                    CascadeInput::Highlight => (Vec::new(), None),
                    CascadeInput::HighlightAndScene => (vec![ctx.scene.clone()], None),
                    CascadeInput::Scene => (Vec::new(), Some(&ctx.scene)),
                };
                let pool = agents::generate_candidates(
                    p,
                    run.run_id(),
                    &highlight,
                    &extra,
                    primary,
                    &prompt.final_prompt,
                    ctx.params.pool_size,
                    ctx.params.seed,
                    run.round,
                )?;
                let files = pool
                    .iter()
                    .map(|c| (candidate_file(c.id()), encode_png(&c.image)))
                    .collect();
                let event = Event::GeneratePool {
                    candidates: pool.iter().map(|c| c.id().to_string()).collect(),
                    highlight: highlight_hash,
                    prompt: sha256_hex(prompt.final_prompt.as_bytes()),
                };
                vec![(event, files)]
            }
            RunState::PoolGenerated => {
                let prompt: PromptRecord = self.read_json(run, PROMPT_JSON)?;
                let mut pool = Vec::with_capacity(run.candidates.len());
                for id in &run.candidates {
                    pool.push(CandidateDesign {
                        meta: CandidateMeta {
                            candidate_id: id.clone(),
                            run_id: run.run_id().into(),
                            stage: CandidateStage::Final,
                            parent: run.pool_highlight.clone(),
                            prompt_hash: run.pool_prompt.clone().unwrap_or_default(),
                            similarity: None,
                            verdict: Verdict::Pending,
                        },
                        image: self.read_image(run, &candidate_file(id))?,
                        mask: None,
                    });
                }
                let reference = self.reference_image(&ctx.scenario)?;
                let settings = EvalSettings {
                    fill: Rgb(ctx.params.mask_fill),
                    top_k: NonZeroUsize::new(ctx.params.top_k)
                        .ok_or_else(|| EngineError::Integrity("top_k is zero".into()))?,
                    mode: ctx.params.verdict_mode,
                    max_rounds: run.header.max_rounds,
                };
                let eval = evaluator::evaluate_pool(
                    p,
                    t,
                    &ctx.scenario,
                    &pool,
                    &reference,
                    &prompt.final_prompt,
                    &settings,
                    run.round,
                )?;
                let mut files: Vec<(String, Vec<u8>)> = eval
                    .masks
                    .iter()
                    .map(|(id, m)| (mask_file(id), encode_mask_png(m)))
                    .collect();
                files.push((EVAL_JSON.to_string(), pretty_json(&eval.report)));
                let event = Event::Evaluate {
                    advanced: eval.report.advanced.clone(),
                    selected: eval.outcome.selected.clone(),
                    disposition: eval.outcome.disposition,
                };
                vec![(event, files)]
            }
            other => return Err(EngineError::NotExecutable(other).into()),
        })
    }

    /// Records a human (or automatic) decision at the current checkpoint.
    /// Re-posting a decision already recorded for a passed stage with the
    /// same payload returns the run unchanged.
    pub fn checkpoint(
        &self,
        run_id: &str,
        input: CheckpointInput,
        expected_version: Option<u64>,
    ) -> Result<PipelineRun, EngineError> {
        let lock = self.run_lock(run_id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let run = self.store.load(run_id)?;
        self.checkpoint_locked(run, input, expected_version)
    }

    fn checkpoint_locked(
        &self,
        run: PipelineRun,
        input: CheckpointInput,
        expected_version: Option<u64>,
    ) -> Result<PipelineRun, EngineError> {
        let Some(name) = stage_artifact(input.stage) else {
            return Err(validation("selection decisions are posted as an expert pick"));
        };
        let before = run.artifacts.get(name).cloned().unwrap_or_default();
        let (files, after) = match (input.decision, input.payload) {
            (Decision::Edited, Some(payload)) => {
                let files = self.edit_files(&run, input.stage, payload)?;
                let after = files
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, b)| sha256_hex(b))
                    .unwrap_or_default();
                (files, after)
            }
            (Decision::Edited, None) => return Err(validation("an edited decision needs a payload")),
            (_, Some(_)) => return Err(validation("a payload is only accepted with an edited decision")),
            (_, None) => (Vec::new(), before.clone()),
        };
        if run.state.checkpoint() != Some(input.stage) && input.decision != Decision::Rejected {
            let repeat = run
                .checkpoints
                .iter()
                .rev()
                .find(|c| c.stage == input.stage)
                .is_some_and(|c| {
                    c.decision == input.decision && c.payload_after == after && run.artifacts.get(name) == Some(&after)
                });
            if repeat {
                return Ok(run);
            }
        }
        check_version(&run, expected_version)?;
        let record = CheckpointRecord {
            stage: input.stage,
            decision: input.decision,
            editor: input.editor,
            payload_before: before,
            payload_after: after,
            timestamp: self.now(),
        };
        self.commit(&run, Event::Checkpoint { record }, files)
    }

    fn edit_files(
        &self,
        run: &PipelineRun,
        stage: CheckpointStage,
        payload: Payload,
    ) -> Result<Vec<(String, Vec<u8>)>, EngineError> {
        match (stage, payload) {
            (CheckpointStage::Description, Payload::Description(lane)) => {
                if !lane.present || lane.raw_text.trim().is_empty() {
                    return Err(validation("an edited description must describe a present lane"));
                }
                Ok(vec![(LOCATOR_JSON.to_string(), pretty_json(&lane))])
            }
            (CheckpointStage::Prompt, Payload::Prompt(text)) => {
                if text.trim().is_empty() {
                    return Err(validation("edited prompt is empty"));
                }
                let current: PromptRecord = self.read_json(run, PROMPT_JSON)?;
                let lane: LaneDescription = self.read_json(run, LOCATOR_JSON)?;
                let optimized = OptimizedPrompt::new(
                    text.trim(),
                    run.header.scenario_id,
                    current.optimized.user_prompt,
                    current.optimized.exemplar_set_id,
                );
                prompt_files(optimized, &lane, true).map_err(|f| validation(f.message))
            }
            (CheckpointStage::Highlight, Payload::Highlight(image)) => {
                let scene = self.read_image(run, SCENE_PNG)?;
                if image.dimensions() != scene.dimensions() {
                    return Err(validation(format!(
                        "edited highlight is {:?}, scene is {:?}",
                        image.dimensions(),
                        scene.dimensions()
                    )));
                }
                Ok(vec![(HIGHLIGHT_PNG.to_string(), encode_png(&image))])
            }
            _ => Err(validation(format!(
                "payload does not match the {} stage",
                stage.as_str()
            ))),
        }
    }

    /// The expert's own choice among the advanced candidates, or none.
    /// Agreement with the agent finalizes the run; otherwise the run waits
    /// for a revise target.
    pub fn expert_pick(
        &self,
        run_id: &str,
        candidate: Option<String>,
        editor: &str,
        expected_version: Option<u64>,
    ) -> Result<PipelineRun, EngineError> {
        self.mutate(run_id, expected_version, |run| {
            self.expert_pick_locked(run, candidate, editor)
        })
    }

    fn expert_pick_locked(
        &self,
        run: PipelineRun,
        candidate: Option<String>,
        editor: &str,
    ) -> Result<PipelineRun, EngineError> {
        let hash_of = |id: &Option<String>| {
            id.as_ref()
                .and_then(|id| run.artifacts.get(&candidate_file(id)).cloned())
                .unwrap_or_default()
        };
        let before = hash_of(&run.agent_selection);
        let after = hash_of(&candidate);
        let decision = match &candidate {
            None => Decision::Rejected,
            Some(c) if run.agent_selection.as_ref() == Some(c) => Decision::Approved,
            Some(_) => Decision::Edited,
        };
        let record = CheckpointRecord {
            stage: CheckpointStage::Selection,
            decision,
            editor: editor.to_string(),
            payload_before: before,
            payload_after: after,
            timestamp: self.now(),
        };
        self.commit(&run, Event::ExpertPick { candidate, record }, Vec::new())
    }

    /// Sends the run back to the description, prompt or highlight checkpoint.
    pub fn revise(
        &self,
        run_id: &str,
        target: ReviseTarget,
        expected_version: Option<u64>,
    ) -> Result<PipelineRun, EngineError> {
        self.mutate(run_id, expected_version, |run| {
            self.commit(&run, Event::ExpertRevise { target }, Vec::new())
        })
    }

    /// Moves an errored run back to the stage that failed without executing it.
    pub fn resume(&self, run_id: &str, expected_version: Option<u64>) -> Result<PipelineRun, EngineError> {
        self.mutate(run_id, expected_version, |run| {
            self.commit(&run, Event::Resume, Vec::new())
        })
    }

    /// Executes stages until the run needs a human, ends, or fails. In auto
    /// checkpoint mode every checkpoint is approved and the expert concurs
    /// with the agent (or, with no agent selection, takes the top advanced
    /// candidate).
    pub fn drive(&self, run_id: &str) -> Result<PipelineRun, EngineError> {
        let auto = self.config.pipeline.checkpoint_mode == CheckpointMode::Auto;
        self.mutate(run_id, None, |mut run| loop {
            run = match run.state {
                s if s.is_executable() => self.execute_locked(run)?,
                RunState::AwaitingExpertPick if auto && !run.awaiting_revise_target => {
                    let Some(pick) = run.agent_selection.clone().or_else(|| run.advanced.first().cloned()) else {
                        return Ok(run);
                    };
                    self.expert_pick_locked(run, Some(pick), AUTO_EDITOR)?
                }
                s if auto && s != RunState::AwaitingExpertPick && s.checkpoint().is_some() => {
                    let stage = s.checkpoint().expect("checked above");
                    let input = CheckpointInput {
                        stage,
                        decision: Decision::Approved,
                        editor: AUTO_EDITOR.into(),
                        payload: None,
                    };
                    self.checkpoint_locked(run, input, None)?
                }
                _ => return Ok(run),
            };
        })
    }

    pub fn eval_report(&self, run: &PipelineRun) -> Result<Option<EvalReport>, EngineError> {
        if !run.artifacts.contains_key(EVAL_JSON) {
            return Ok(None);
        }
        self.read_json(run, EVAL_JSON).map(Some)
    }

    pub fn prompt_record(&self, run: &PipelineRun) -> Result<Option<PromptRecord>, EngineError> {
        if !run.artifacts.contains_key(PROMPT_JSON) {
            return Ok(None);
        }
        self.read_json(run, PROMPT_JSON).map(Some)
    }

    pub fn lane_description(&self, run: &PipelineRun) -> Result<Option<LaneDescription>, EngineError> {
        if !run.artifacts.contains_key(LOCATOR_JSON) {
            return Ok(None);
        }
        self.read_json(run, LOCATOR_JSON).map(Some)
    }

    /// Current pool with scores and verdicts when evaluated.
    pub fn candidates(&self, run: &PipelineRun) -> Result<Vec<CandidateView>, EngineError> {
        let report = self.eval_report(run)?;
        let mut out = Vec::new();
        for id in &run.candidates {
            let sha256 = run.artifacts.get(&candidate_file(id)).cloned().unwrap_or_default();
            let (rank, similarity, empty_mask) = report
                .as_ref()
                .and_then(|r| {
                    r.ranking
                        .iter()
                        .position(|e| &e.candidate_id == id)
                        .map(|i| (Some(i + 1), r.ranking[i].similarity, r.ranking[i].empty_mask))
                })
                .unwrap_or((None, None, false));
            let check = report.as_ref().and_then(|r| r.compliance.get(id));
            out.push(CandidateView {
                candidate_id: id.clone(),
                sha256,
                rank,
                similarity,
                empty_mask,
                advanced: run.advanced.contains(id),
                agent_selected: run.agent_selection.as_ref() == Some(id),
                expert_pick: run.expert_pick.as_ref() == Some(id),
                verdict: check.map_or(Verdict::Pending, |c| c.verdict),
                verdict_flagged: check.is_some_and(|c| c.flagged),
            });
        }
        out.sort_by_key(|c| (c.rank.unwrap_or(usize::MAX), c.candidate_id.clone()));
        Ok(out)
    }

    /// Bytes of a PNG artifact (live or archived) by content hash.
    pub fn image_by_hash(&self, run: &PipelineRun, hash: &str) -> Result<Vec<u8>, EngineError> {
        let name = run
            .artifacts
            .iter()
            .find(|(n, h)| h.as_str() == hash && n.ends_with(".png"))
            .map(|(n, _)| n.clone())
            .ok_or_else(|| EngineError::NotFound(format!("image {hash}")))?;
        let bytes = self.store.read_artifact(run.run_id(), &name)?;
        if sha256_hex(&bytes) != hash {
            return Err(EngineError::Integrity(format!(
                "artifact {name} does not match its hash"
            )));
        }
        Ok(bytes)
    }
}

fn check_version(run: &PipelineRun, expected: Option<u64>) -> Result<(), EngineError> {
    match expected {
        Some(v) if v != run.version => Err(EngineError::VersionConflict {
            expected: v,
            actual: run.version,
        }),
        _ => Ok(()),
    }
}

fn prompt_files(
    optimized: OptimizedPrompt,
    lane: &LaneDescription,
    edited: bool,
) -> Result<Vec<(String, Vec<u8>)>, StageFailure> {
    let final_prompt = compose_generation_prompt(&optimized, lane).map_err(|e| StageFailure {
        message: e.to_string(),
        provider: false,
    })?;
    let record = PromptRecord {
        optimized,
        final_prompt,
        edited,
    };
    Ok(vec![
        (PROMPT_TXT.to_string(), record.optimized.text.clone().into_bytes()),
        (PROMPT_JSON.to_string(), pretty_json(&record)),
    ])
}
