//! TOML configuration. Secrets are never stored here, only the names of the
//! environment variables that hold them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bikelane_core::evaluate::VerdictMode;
use bikelane_core::lane::DEFAULT_ABSENCE_PHRASES;
use bikelane_core::Rgb;
use serde::{Deserialize, Serialize};

use crate::providers::fixture::{Record, Replay};
use crate::providers::http::HttpBackend;
use crate::providers::mock::{JudgePolicy, MockJudge, MockReasoner, MockSegmenter, MockSuite};
use crate::providers::{Backend, Capability, Providers, RetryPolicy, DEFAULT_CONCURRENCY};

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Io(String, std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingSecret(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Which image the second cascade step edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CascadeInput {
    #[default]
    Highlight,
    /// Highlight image first, original scene as an extra input.
    HighlightAndScene,
    Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Checkpoints are approved automatically and the expert concurs with
    /// the agent's pick.
    #[default]
    Auto,
    /// Execution stops at each checkpoint until a decision is posted.
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pool_size: u32,
    pub top_k: usize,
    pub max_rounds: u32,
    pub highlight_color: String,
    pub mask_fill: [u8; 3],
    pub verdict_mode: String,
    pub cascade_input: CascadeInput,
    pub seed: u64,
    pub runs_dir: PathBuf,
    pub references_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub exemplar_set: String,
    pub absence_phrases: Vec<String>,
    pub checkpoint_mode: CheckpointMode,
    pub user_prompt: String,
    /// Model requested for prompt optimization; the reasoner's own model
    /// is used when unset.
    pub optimizer_model: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pool_size: 6,
            top_k: 3,
            max_rounds: 3,
            highlight_color: "green".into(),
            mask_fill: Rgb::MID_GRAY.0,
            verdict_mode: "lenient".into(),
            cascade_input: CascadeInput::Highlight,
            seed: 0,
            runs_dir: "runs".into(),
            references_dir: None,
            templates_dir: None,
            exemplar_set: "default".into(),
            absence_phrases: DEFAULT_ABSENCE_PHRASES.iter().map(|s| s.to_string()).collect(),
            checkpoint_mode: CheckpointMode::Auto,
            user_prompt: "Depict the bike lane for the selected design scenario.".into(),
            optimizer_model: None,
        }
    }
}

impl PipelineConfig {
    pub fn verdict_mode(&self) -> Result<VerdictMode, ConfigError> {
        match self.verdict_mode.as_str() {
            "strict" => Ok(VerdictMode::Strict),
            "lenient" => Ok(VerdictMode::Lenient),
            other => Err(invalid(format!("verdict_mode must be strict or lenient, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_retries: u32,
    pub backoff_secs: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_secs: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
    Replay,
    /// Live HTTP calls, each exchange written to the fixture directory.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_ref: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub retry_backoff: Option<f64>,
    pub concurrency: Option<usize>,
    pub fixtures: Option<PathBuf>,
    /// Passed through to the provider untouched.
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub editor: ProviderConfig,
    pub reasoner: ProviderConfig,
    pub embedder: ProviderConfig,
    pub segmenter: ProviderConfig,
    pub judge: ProviderConfig,
}

impl ProvidersConfig {
    pub fn get(&self, cap: Capability) -> &ProviderConfig {
        match cap {
            Capability::EditImage => &self.editor,
            Capability::Describe => &self.reasoner,
            Capability::Embed => &self.embedder,
            Capability::Segment => &self.segmenter,
            Capability::Judge => &self.judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// `yes`, `no`, `hashed` or `strict`.
    pub judge: String,
    pub judge_yes_per_mille: u16,
    /// JSON object mapping image hash (or `text:<sha256>`) to response text.
    pub reasoner_table: Option<PathBuf>,
    /// Answer reasoner misses with built-in rules instead of failing.
    pub reasoner_fallback: bool,
    /// Directory of `<image hash>.png` masks.
    pub segment_sidecar: Option<PathBuf>,
    pub segment_corridor_fallback: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            judge: "yes".into(),
            judge_yes_per_mille: 500,
            reasoner_table: None,
            reasoner_fallback: true,
            segment_sidecar: None,
            segment_corridor_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreetViewKind {
    #[default]
    Mock,
    Google,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub source: StreetViewKind,
    pub endpoint: String,
    pub credential_ref: String,
    pub headings: Vec<f64>,
    pub pitch: f64,
    pub fov: f64,
    pub size: u32,
    pub timeout_secs: f64,
    pub qc_store: PathBuf,
    pub scenes_dir: PathBuf,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            source: StreetViewKind::Mock,
            endpoint: "https://maps.googleapis.com/maps/api/streetview".into(),
            credential_ref: "STREETVIEW_API_KEY".into(),
            headings: vec![0.0, 90.0, 180.0, 270.0],
            pitch: 0.0,
            fov: 90.0,
            size: 1024,
            timeout_secs: 30.0,
            qc_store: "qc.jsonl".into(),
            scenes_dir: "scenes".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Environment variable holding the shared bearer token; unset disables auth.
    pub token_env: Option<String>,
    /// Gold-label CSV served by the accuracy report endpoint.
    pub labels: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token_env: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub retry: RetryConfig,
    pub providers: ProvidersConfig,
    pub mock: MockConfig,
    pub ingest: IngestConfig,
    pub service: ServiceConfig,
}

fn secs(s: f64, what: &str) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(s).map_err(|_| invalid(format!("{what} must be a non-negative number of seconds")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.pipeline.runs_dir);
        fix(&mut self.ingest.qc_store);
        fix(&mut self.ingest.scenes_dir);
        for p in [
            &mut self.pipeline.references_dir,
            &mut self.pipeline.templates_dir,
            &mut self.mock.reasoner_table,
            &mut self.mock.segment_sidecar,
            &mut self.service.labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for cap in Capability::ALL {
            let pc = match cap {
                Capability::EditImage => &mut self.providers.editor,
                Capability::Describe => &mut self.providers.reasoner,
                Capability::Embed => &mut self.providers.embedder,
                Capability::Segment => &mut self.providers.segmenter,
                Capability::Judge => &mut self.providers.judge,
            };
            if let Some(p) = pc.fixtures.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        if !(5..=10).contains(&p.pool_size) {
            return Err(invalid(format!("pool_size must be in 5..=10, got {}", p.pool_size)));
        }
        if p.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if p.max_rounds == 0 {
            return Err(invalid("max_rounds must be at least 1"));
        }
        if p.highlight_color.trim().is_empty() {
            return Err(invalid("highlight_color is empty"));
        }
        p.verdict_mode()?;
        secs(self.retry.backoff_secs, "retry.backoff_secs")?;
        for cap in Capability::ALL {
            let pc = self.providers.get(cap);
            let name = cap.as_str();
            if let Some(t) = pc.timeout_secs {
                if t <= 0.0 || !t.is_finite() {
                    return Err(invalid(format!("providers.{name}.timeout_secs must be > 0")));
                }
            }
            if let Some(b) = pc.retry_backoff {
                secs(b, "retry_backoff")?;
            }
            match pc.kind {
                ProviderKind::Http | ProviderKind::Record => {
                    let ep = pc
                        .endpoint
                        .as_deref()
                        .ok_or_else(|| invalid(format!("providers.{name} needs an endpoint")))?;
                    url::Url::parse(ep).map_err(|e| invalid(format!("providers.{name}.endpoint: {e}")))?;
                }
                _ => {}
            }
            if matches!(pc.kind, ProviderKind::Replay | ProviderKind::Record) && pc.fixtures.is_none() {
                return Err(invalid(format!("providers.{name} needs a fixtures directory")));
            }
        }
        if !["yes", "no", "hashed", "strict"].contains(&self.mock.judge.as_str()) {
            return Err(invalid("mock.judge must be yes, no, hashed or strict"));
        }
        if self.ingest.headings.is_empty() {
            return Err(invalid("ingest.headings is empty"));
        }
        Ok(())
    }

    /// Every provider replaced by its mock.
    pub fn with_mocks(mut self) -> Self {
        for cap in Capability::ALL {
            let pc = match cap {
                Capability::EditImage => &mut self.providers.editor,
                Capability::Describe => &mut self.providers.reasoner,
                Capability::Embed => &mut self.providers.embedder,
                Capability::Segment => &mut self.providers.segmenter,
                Capability::Judge => &mut self.providers.judge,
            };
            pc.kind = ProviderKind::Mock;
        }
        self
    }

    pub fn mock_suite(&self) -> Result<MockSuite, ConfigError> {
        let m = &self.mock;
        let mut reasoner = MockReasoner {
            table: BTreeMap::new(),
            fallback: m.reasoner_fallback,
        };
        if let Some(path) = &m.reasoner_table {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
            reasoner.table = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        }
        let segmenter = MockSegmenter {
            table: BTreeMap::new(),
            sidecar: m.segment_sidecar.clone(),
            corridor_fallback: m.segment_corridor_fallback,
        };
        let policy = match m.judge.as_str() {
            "hashed" => JudgePolicy::Hashed {
                yes_per_mille: m.judge_yes_per_mille,
            },
            "strict" => JudgePolicy::Strict,
            other => JudgePolicy::Always(other.to_string()),
        };
        Ok(MockSuite {
            reasoner: Arc::new(reasoner),
            segmenter: Arc::new(segmenter),
            judge: Arc::new(MockJudge {
                table: BTreeMap::new(),
                policy,
            }),
            ..MockSuite::default()
        })
    }

    pub fn default_retry(&self) -> Result<RetryPolicy, ConfigError> {
        Ok(RetryPolicy::new(
            self.retry.max_retries,
            secs(self.retry.backoff_secs, "retry.backoff_secs")?,
        ))
    }

    fn http_backend(&self, cap: Capability) -> Result<HttpBackend, ConfigError> {
        let pc = self.providers.get(cap);
        let endpoint = url::Url::parse(pc.endpoint.as_deref().unwrap_or_default())
            .map_err(|e| invalid(format!("providers.{}.endpoint: {e}", cap.as_str())))?;
        let token = match &pc.credential_ref {
            Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingSecret(var.clone()))?),
            None => None,
        };
        HttpBackend::new(
            endpoint,
            token,
            secs(pc.timeout_secs.unwrap_or(60.0), "timeout_secs")?,
            pc.model.clone(),
            pc.params.clone(),
        )
        .map_err(|e| invalid(e.to_string()))
    }

    /// Builds the provider set with the given mocks for `mock` slots.
    pub fn build_providers(&self, mocks: &MockSuite) -> Result<Providers, ConfigError> {
        let mut b = Providers::builder().retry(self.default_retry()?);
        for cap in Capability::ALL {
            let pc = self.providers.get(cap);
            let backend: Arc<dyn Backend> = match pc.kind {
                ProviderKind::Mock => mocks.get(cap),
                ProviderKind::Http => Arc::new(self.http_backend(cap)?),
                ProviderKind::Replay => Arc::new(Replay::new(pc.fixtures.clone().unwrap_or_default())),
                ProviderKind::Record => Arc::new(Record::new(
                    pc.fixtures.clone().unwrap_or_default(),
                    self.http_backend(cap)?,
                )),
            };
            b = b.backend(cap, backend, pc.concurrency.unwrap_or(DEFAULT_CONCURRENCY));
            if pc.max_retries.is_some() || pc.retry_backoff.is_some() {
                let base = self.default_retry()?;
                b = b.retry_for(
                    cap,
                    RetryPolicy::new(
                        pc.max_retries.unwrap_or(base.max_retries),
                        match pc.retry_backoff {
                            Some(s) => secs(s, "retry_backoff")?,
                            None => base.base,
                        },
                    ),
                );
            }
        }
        b.build().map_err(invalid)
    }

    pub fn mask_fill(&self) -> Rgb {
        Rgb(self.pipeline.mask_fill)
    }
}
