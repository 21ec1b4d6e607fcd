//! Event-sourced run state machine with the four human checkpoints.
//!
//! ```text
//! Created -> Located -(description)-> DescriptionApproved -> PromptOptimized
//!   -(prompt)-> PromptApproved -> Highlighted -(highlight)-> HighlightApproved
//!   -> PoolGenerated -> Evaluated -> AwaitingExpertPick -(selection)-> Finalized
//! ```
//!
//! `Located` may branch to `Excluded`. A rejected checkpoint sends the run back
//! to the executable state that produced the payload. `Evaluated` loops to
//! `HighlightApproved` for another pool while rounds remain, and an expert
//! disagreement sends the run back to the description, prompt or highlight
//! checkpoint. Every executable state may fail into `Errored` and resume.
//!
//! A run is never mutated in place; each accepted event produces a new
//! version and a [`LogEntry`], and [`replay`] folds the log back into the run.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::evaluate::Disposition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RunState {
    Created,
    Located,
    DescriptionApproved,
    PromptOptimized,
    PromptApproved,
    Highlighted,
    HighlightApproved,
    PoolGenerated,
    Evaluated,
    AwaitingExpertPick,
    Finalized,
    Excluded,
    Errored,
}

impl RunState {
    pub const ALL: [RunState; 13] = [
        RunState::Created,
        RunState::Located,
        RunState::DescriptionApproved,
        RunState::PromptOptimized,
        RunState::PromptApproved,
        RunState::Highlighted,
        RunState::HighlightApproved,
        RunState::PoolGenerated,
        RunState::Evaluated,
        RunState::AwaitingExpertPick,
        RunState::Finalized,
        RunState::Excluded,
        RunState::Errored,
    ];

    /// States where the engine runs an agent rather than waiting on a human.
    pub fn is_executable(self) -> bool {
        matches!(
            self,
            RunState::Created
                | RunState::DescriptionApproved
                | RunState::PromptApproved
                | RunState::HighlightApproved
                | RunState::PoolGenerated
                | RunState::Evaluated
        )
    }

    pub fn checkpoint(self) -> Option<CheckpointStage> {
        match self {
            RunState::Located => Some(CheckpointStage::Description),
            RunState::PromptOptimized => Some(CheckpointStage::Prompt),
            RunState::Highlighted => Some(CheckpointStage::Highlight),
            RunState::AwaitingExpertPick => Some(CheckpointStage::Selection),
            _ => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Finalized | RunState::Excluded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Description,
    Prompt,
    Highlight,
    Selection,
}

impl CheckpointStage {
    pub const ALL: [CheckpointStage; 4] = [
        CheckpointStage::Description,
        CheckpointStage::Prompt,
        CheckpointStage::Highlight,
        CheckpointStage::Selection,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointStage::Description => "description",
            CheckpointStage::Prompt => "prompt",
            CheckpointStage::Highlight => "highlight",
            CheckpointStage::Selection => "selection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approved,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviseTarget {
    Description,
    Prompt,
    Highlight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage: CheckpointStage,
    pub decision: Decision,
    pub editor: String,
    pub payload_before: String,
    pub payload_after: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Locate,
    Exclude,
    Checkpoint {
        record: CheckpointRecord,
    },
    OptimizePrompt,
    Highlight,
    GeneratePool {
        candidates: Vec<String>,
        /// Content hashes of the highlight image and prompt the pool was generated from.
        highlight: String,
        prompt: String,
    },
    Evaluate {
        advanced: Vec<String>,
        selected: Option<String>,
        disposition: Disposition,
    },
    Regenerate,
    AwaitExpert,
    ExpertPick {
        candidate: Option<String>,
        record: CheckpointRecord,
    },
    ExpertRevise {
        target: ReviseTarget,
    },
    Fail {
        stage: String,
        message: String,
    },
    Resume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Locate,
    Exclude,
    Checkpoint,
    OptimizePrompt,
    Highlight,
    GeneratePool,
    Evaluate,
    Regenerate,
    AwaitExpert,
    ExpertPick,
    ExpertRevise,
    Fail,
    Resume,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Locate => EventKind::Locate,
            Event::Exclude => EventKind::Exclude,
            Event::Checkpoint { .. } => EventKind::Checkpoint,
            Event::OptimizePrompt => EventKind::OptimizePrompt,
            Event::Highlight => EventKind::Highlight,
            Event::GeneratePool { .. } => EventKind::GeneratePool,
            Event::Evaluate { .. } => EventKind::Evaluate,
            Event::Regenerate => EventKind::Regenerate,
            Event::AwaitExpert => EventKind::AwaitExpert,
            Event::ExpertPick { .. } => EventKind::ExpertPick,
            Event::ExpertRevise { .. } => EventKind::ExpertRevise,
            Event::Fail { .. } => EventKind::Fail,
            Event::Resume => EventKind::Resume,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal transition: {event:?} in state {state:?}")]
    IllegalTransition { state: RunState, event: EventKind },
    #[error("round budget spent ({round} of {max_rounds})")]
    RoundBudget { round: u32, max_rounds: u32 },
    #[error("candidate {0} was not advanced to compliance review")]
    NotAdvanced(String),
    #[error("edited checkpoint must change the payload")]
    EditUnchanged,
    #[error("checkpoint record is for {found:?}, run awaits {expected:?}")]
    StageMismatch {
        expected: Option<CheckpointStage>,
        found: CheckpointStage,
    },
}

/// Fixed parameters of a run, written once as the first log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub scene_id: String,
    pub scenario_id: u8,
    pub max_rounds: u32,
    /// Engine-level settings (user prompt, pool size, seed, ...).
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub header: RunHeader,
    pub version: u64,
    pub state: RunState,
    pub round: u32,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Live artifact name (path relative to the run directory) to content hash.
    pub artifacts: BTreeMap<String, String>,
    pub candidates: Vec<String>,
    pub advanced: Vec<String>,
    pub agent_selection: Option<String>,
    pub disposition: Option<Disposition>,
    pub expert_pick: Option<String>,
    /// Set once the run is finalized.
    pub final_selection: Option<String>,
    pub pool_highlight: Option<String>,
    pub pool_prompt: Option<String>,
    pub expert_concurred: bool,
    pub awaiting_revise_target: bool,
    pub resume_state: Option<RunState>,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Archived {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogBody {
    Genesis {
        header: RunHeader,
        artifacts: BTreeMap<String, String>,
    },
    Transition {
        event: Event,
        /// Artifacts moved out of the live set before `artifacts` is applied.
        archived: Vec<Archived>,
        artifacts: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub version: u64,
    pub at: String,
    #[serde(flatten)]
    pub body: LogBody,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("run log is empty")]
    Empty,
    #[error("first log record must be the genesis record")]
    MissingGenesis,
    #[error("log version {found} where {expected} was expected")]
    VersionGap { expected: u64, found: u64 },
    #[error("replaying version {version}: {source}")]
    Transition {
        version: u64,
        #[source]
        source: TransitionError,
    },
}

/// Pipeline phase that produces an artifact, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ArtifactPhase {
    Input,
    Locate,
    Prompt,
    Highlight,
    Pool,
    Evaluation,
}

pub fn artifact_phase(name: &str) -> Option<ArtifactPhase> {
    Some(match name {
        "scene.png" => ArtifactPhase::Input,
        "locator.json" => ArtifactPhase::Locate,
        "prompt.txt" | "prompt.json" => ArtifactPhase::Prompt,
        "highlight.png" => ArtifactPhase::Highlight,
        "eval.json" => ArtifactPhase::Evaluation,
        n if n.starts_with("candidates/") => ArtifactPhase::Pool,
        n if n.starts_with("masks/") => ArtifactPhase::Evaluation,
        _ => return None,
    })
}

fn illegal(state: RunState, event: &Event) -> TransitionError {
    TransitionError::IllegalTransition {
        state,
        event: event.kind(),
    }
}

impl PipelineRun {
    pub fn new(header: RunHeader) -> Self {
        Self {
            header,
            version: 1,
            state: RunState::Created,
            round: 1,
            checkpoints: Vec::new(),
            artifacts: BTreeMap::new(),
            candidates: Vec::new(),
            advanced: Vec::new(),
            agent_selection: None,
            disposition: None,
            expert_pick: None,
            final_selection: None,
            pool_highlight: None,
            pool_prompt: None,
            expert_concurred: false,
            awaiting_revise_target: false,
            resume_state: None,
            last_error: None,
        }
    }

    pub fn run_id(&self) -> &str {
        &self.header.run_id
    }

    /// A fresh run plus its genesis record carrying the input artifacts.
    pub fn create(
        header: RunHeader,
        artifacts: BTreeMap<String, String>,
        at: impl Into<String>,
    ) -> (PipelineRun, LogEntry) {
        let mut run = Self::new(header.clone());
        run.artifacts = artifacts.clone();
        let entry = LogEntry {
            version: 1,
            at: at.into(),
            body: LogBody::Genesis { header, artifacts },
        };
        (run, entry)
    }

    fn checkpoint_transition(&mut self, record: &CheckpointRecord) -> Result<(), TransitionError> {
        let expected = self.state.checkpoint();
        if expected != Some(record.stage) || record.stage == CheckpointStage::Selection {
            return Err(TransitionError::StageMismatch {
                expected,
                found: record.stage,
            });
        }
        if record.decision == Decision::Edited && record.payload_before == record.payload_after {
            return Err(TransitionError::EditUnchanged);
        }
        let (forward, back) = match record.stage {
            CheckpointStage::Description => (RunState::DescriptionApproved, RunState::Created),
            CheckpointStage::Prompt => (RunState::PromptApproved, RunState::DescriptionApproved),
            CheckpointStage::Highlight => (RunState::HighlightApproved, RunState::PromptApproved),
            CheckpointStage::Selection => unreachable!(),
        };
        self.state = match record.decision {
            Decision::Approved | Decision::Edited => forward,
            Decision::Rejected => back,
        };
        self.checkpoints.push(record.clone());
        Ok(())
    }

    fn take_round(&mut self) -> Result<(), TransitionError> {
        if self.round >= self.header.max_rounds {
            return Err(TransitionError::RoundBudget {
                round: self.round,
                max_rounds: self.header.max_rounds,
            });
        }
        self.round += 1;
        Ok(())
    }

    fn clear_evaluation(&mut self) {
        self.candidates.clear();
        self.advanced.clear();
        self.agent_selection = None;
        self.disposition = None;
        self.expert_pick = None;
        self.pool_highlight = None;
        self.pool_prompt = None;
        self.awaiting_revise_target = false;
    }

    /// Applies one event to a copy of the run. The version is not bumped.
    pub fn transition(&self, event: &Event) -> Result<PipelineRun, TransitionError> {
        use RunState::*;
        let mut next = self.clone();
        match (self.state, event) {
            (Created, Event::Locate) => next.state = Located,
            (Located, Event::Exclude) => next.state = Excluded,
            (Located | PromptOptimized | Highlighted, Event::Checkpoint { record }) => {
                next.checkpoint_transition(record)?
            }
            (DescriptionApproved, Event::OptimizePrompt) => next.state = PromptOptimized,
            (PromptApproved, Event::Highlight) => next.state = Highlighted,
            (
                HighlightApproved,
                Event::GeneratePool {
                    candidates,
                    highlight,
                    prompt,
                },
            ) => {
                next.clear_evaluation();
                next.candidates = candidates.clone();
                next.pool_highlight = Some(highlight.clone());
                next.pool_prompt = Some(prompt.clone());
                next.state = PoolGenerated;
            }
            (
                PoolGenerated,
                Event::Evaluate {
                    advanced,
                    selected,
                    disposition,
                },
            ) => {
                if let Some(s) = selected {
                    if !advanced.contains(s) || !self.candidates.contains(s) {
                        return Err(TransitionError::NotAdvanced(s.clone()));
                    }
                }
                next.advanced = advanced.clone();
                next.agent_selection = selected.clone();
                next.disposition = Some(*disposition);
                next.state = Evaluated;
            }
            (Evaluated, Event::Regenerate) if self.disposition == Some(Disposition::Regenerate) => {
                next.take_round()?;
                next.clear_evaluation();
                next.state = HighlightApproved;
            }
            (Evaluated, Event::AwaitExpert) if self.disposition != Some(Disposition::Regenerate) => {
                next.state = AwaitingExpertPick;
            }
            (AwaitingExpertPick, Event::ExpertPick { candidate, record }) => {
                if record.stage != CheckpointStage::Selection {
                    return Err(TransitionError::StageMismatch {
                        expected: Some(CheckpointStage::Selection),
                        found: record.stage,
                    });
                }
                if let Some(c) = candidate {
                    if !self.advanced.contains(c) {
                        return Err(TransitionError::NotAdvanced(c.clone()));
                    }
                }
                next.expert_pick = candidate.clone();
                next.checkpoints.push(record.clone());
                // With no agent selection (round budget spent) the expert's
                // own pick is final.
                let concurs = match (&self.agent_selection, candidate) {
                    (Some(agent), Some(expert)) => agent == expert,
                    (None, Some(_)) => true,
                    (_, None) => false,
                };
                if concurs {
                    next.expert_concurred = true;
                    next.final_selection = candidate.clone();
                    next.awaiting_revise_target = false;
                    next.state = Finalized;
                } else {
                    next.awaiting_revise_target = true;
                }
            }
            (Evaluated | AwaitingExpertPick, Event::ExpertRevise { target }) => {
                if self.state == Evaluated && self.disposition == Some(Disposition::Regenerate) {
                    return Err(illegal(self.state, event));
                }
                next.take_round()?;
                next.clear_evaluation();
                next.state = match target {
                    ReviseTarget::Description => Located,
                    ReviseTarget::Prompt => PromptOptimized,
                    ReviseTarget::Highlight => Highlighted,
                };
            }
            (s, Event::Fail { message, .. }) if s.is_executable() => {
                next.resume_state = Some(s);
                next.last_error = Some(message.clone());
                next.state = Errored;
            }
            (Errored, Event::Resume) => {
                next.state = self.resume_state.unwrap_or(Created);
                next.resume_state = None;
            }
            _ => return Err(illegal(self.state, event)),
        }
        Ok(next)
    }

    /// Live artifacts that `event` would invalidate.
    pub fn stale_artifacts(&self, event: &Event) -> Vec<String> {
        let from = match event {
            Event::Checkpoint { record } if record.decision == Decision::Rejected => match record.stage {
                CheckpointStage::Description => Some(ArtifactPhase::Locate),
                CheckpointStage::Prompt => Some(ArtifactPhase::Prompt),
                CheckpointStage::Highlight => Some(ArtifactPhase::Highlight),
                CheckpointStage::Selection => None,
            },
            Event::Regenerate => Some(ArtifactPhase::Pool),
            Event::ExpertRevise { target } => Some(match target {
                ReviseTarget::Description => ArtifactPhase::Prompt,
                ReviseTarget::Prompt => ArtifactPhase::Highlight,
                ReviseTarget::Highlight => ArtifactPhase::Pool,
            }),
            _ => None,
        };
        let Some(from) = from else {
            return Vec::new();
        };
        self.artifacts
            .keys()
            .filter(|name| artifact_phase(name).is_some_and(|p| p >= from))
            .cloned()
            .collect()
    }

    /// Validates `event`, archives invalidated or overwritten artifacts and
    /// returns the next run version with its log record.
    pub fn advance(
        &self,
        event: Event,
        artifacts: BTreeMap<String, String>,
        at: impl Into<String>,
    ) -> Result<(PipelineRun, LogEntry), TransitionError> {
        self.transition(&event)?;
        let version = self.version + 1;
        let mut stale = self.stale_artifacts(&event);
        for (name, hash) in &artifacts {
            if self.artifacts.get(name).is_some_and(|h| h != hash) && !stale.contains(name) {
                stale.push(name.clone());
            }
        }
        stale.sort();
        let archived = stale
            .into_iter()
            .map(|from| Archived {
                to: format!("stale/v{version}/{from}"),
                from,
            })
            .collect();
        let entry = LogEntry {
            version,
            at: at.into(),
            body: LogBody::Transition {
                event,
                archived,
                artifacts,
            },
        };
        let next = self.apply_entry(&entry)?;
        Ok((next, entry))
    }

    pub fn apply_entry(&self, entry: &LogEntry) -> Result<PipelineRun, TransitionError> {
        let LogBody::Transition {
            event,
            archived,
            artifacts,
        } = &entry.body
        else {
            return Ok(self.clone());
        };
        let mut next = self.transition(event)?;
        for a in archived {
            if let Some(hash) = next.artifacts.remove(&a.from) {
                next.artifacts.insert(a.to.clone(), hash);
            }
        }
        next.artifacts
            .extend(artifacts.iter().map(|(k, v)| (k.clone(), v.clone())));
        next.version = entry.version;
        Ok(next)
    }

    /// Live artifacts only, excluding archived copies under `stale/`.
    pub fn live_artifacts(&self) -> impl Iterator<Item = (&String, &String)> {
        self.artifacts.iter().filter(|(k, _)| !k.starts_with("stale/"))
    }

    pub fn has_all_checkpoints(&self) -> bool {
        CheckpointStage::ALL
            .iter()
            .all(|s| self.checkpoints.iter().any(|c| c.stage == *s))
    }
}

/// Rebuilds a run from its log.
pub fn replay(entries: &[LogEntry]) -> Result<PipelineRun, ReplayError> {
    let (first, rest) = entries.split_first().ok_or(ReplayError::Empty)?;
    let LogBody::Genesis { header, artifacts } = &first.body else {
        return Err(ReplayError::MissingGenesis);
    };
    let mut run = PipelineRun::new(header.clone());
    run.artifacts = artifacts.clone();
    for entry in rest {
        let expected = run.version + 1;
        if entry.version != expected {
            return Err(ReplayError::VersionGap {
                expected,
                found: entry.version,
            });
        }
        if matches!(entry.body, LogBody::Genesis { .. }) {
            return Err(ReplayError::MissingGenesis);
        }
        run = run.apply_entry(entry).map_err(|source| ReplayError::Transition {
            version: entry.version,
            source,
        })?;
    }
    Ok(run)
}
