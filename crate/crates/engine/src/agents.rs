//! Lane localization, prompt optimization and the two-step cascade.

use std::collections::BTreeMap;

use bikelane_core::domain::{
    CandidateDesign, CandidateMeta, CandidateStage, DesignScenario, LaneDescription, OptimizedPrompt, StreetScene,
    Verdict,
};
use bikelane_core::lane::{parse_locator_response, ComposeError};
use bikelane_core::template::{self, ExemplarSet, RenderedPrompt, TemplateError};
use bikelane_core::Raster;

use crate::imaging::{raster_hash, sha256_hex};
use crate::providers::{DescribeRequest, EditRequest, ProviderError, Providers};
use crate::templates::TemplateSet;

pub const MIN_POOL: u32 = 5;
pub const MAX_POOL: u32 = 10;
pub const HIGHLIGHT_ID: &str = "highlight";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error("optimizer returned an empty prompt")]
    EmptyOptimization,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{} of {requested} candidates failed: {}", failures.len(), failures.first().map(|f| f.1.to_string()).unwrap_or_default())]
    PartialPool {
        requested: u32,
        completed: Vec<CandidateDesign>,
        failures: Vec<(u32, ProviderError)>,
    },
}

/// Asks the reasoning model where the lane is and parses the answer.
pub fn locate_lane(
    providers: &Providers,
    templates: &TemplateSet,
    scene: &StreetScene,
    absence_phrases: &[&str],
) -> Result<LaneDescription, AgentError> {
    let prompt = templates.locator.render(&BTreeMap::new())?;
    let text = providers.describe(DescribeRequest {
        image: Some(scene.image.clone()),
        system_prompt: prompt.system,
        user_prompt: prompt.user,
        model: None,
    })?;
    Ok(parse_locator_response(&text, absence_phrases))
}

/// Renders the optimizer request for a scenario without calling any provider.
pub fn optimizer_request(
    templates: &TemplateSet,
    user_prompt: &str,
    scenario: &DesignScenario,
    exemplars: &ExemplarSet,
) -> Result<RenderedPrompt, AgentError> {
    let rendered_exemplars = exemplars.render();
    let vars = BTreeMap::from([
        (template::EXEMPLARS, rendered_exemplars.as_str()),
        (template::BOUNDARY_CLAUSES, scenario.prompt_fragment.as_str()),
        (template::USER_PROMPT, user_prompt.trim()),
    ]);
    Ok(templates.optimizer.render(&vars)?)
}

pub fn optimize_prompt(
    providers: &Providers,
    templates: &TemplateSet,
    user_prompt: &str,
    scenario: &DesignScenario,
    exemplars: &ExemplarSet,
    model: Option<&str>,
) -> Result<OptimizedPrompt, AgentError> {
    if user_prompt.trim().is_empty() {
        return Err(AgentError::Precondition("user prompt is empty".into()));
    }
    let req = optimizer_request(templates, user_prompt, scenario, exemplars)?;
    let text = match providers.describe(DescribeRequest {
        image: None,
        system_prompt: req.system,
        user_prompt: req.user,
        model: model.map(str::to_string),
    }) {
        Ok(t) => t,
        Err(ProviderError::MalformedResponse(m)) if m == "empty text" => return Err(AgentError::EmptyOptimization),
        Err(e) => return Err(e.into()),
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(AgentError::EmptyOptimization);
    }
    Ok(OptimizedPrompt::new(
        text,
        scenario.scenario_id,
        user_prompt,
        exemplars.exemplar_set_id.clone(),
    ))
}

pub fn highlight_request(templates: &TemplateSet, color: &str) -> Result<RenderedPrompt, AgentError> {
    if color.trim().is_empty() {
        return Err(AgentError::Precondition("highlight color is empty".into()));
    }
    Ok(templates
        .highlight
        .render(&BTreeMap::from([(template::COLOR, color.trim())]))?)
}

/// First cascade step: paint the existing lane corridor in `color`.
pub fn generate_highlight(
    providers: &Providers,
    templates: &TemplateSet,
    run_id: &str,
    scene: &Raster,
    lane: &LaneDescription,
    color: &str,
    seed: u64,
) -> Result<CandidateDesign, AgentError> {
    if !lane.present {
        return Err(ComposeError::LaneAbsent.into());
    }
    let prompt = highlight_request(templates, color)?;
    let prompt_hash = sha256_hex(prompt.user.as_bytes());
    let mut images = providers.edit_image(EditRequest {
        image: scene.clone(),
        extra_images: Vec::new(),
        system_prompt: Some(prompt.system),
        prompt: prompt.user,
        n: 1,
        seed,
    })?;
    Ok(CandidateDesign {
        meta: CandidateMeta {
            candidate_id: HIGHLIGHT_ID.into(),
            run_id: run_id.into(),
            stage: CandidateStage::Highlight,
            parent: None,
            prompt_hash,
            similarity: None,
            verdict: Verdict::Pending,
        },
        image: images.remove(0),
        mask: None,
    })
}

pub fn candidate_id(round: u32, slot: u32) -> String {
    format!("r{round}-c{slot:02}")
}

/// Seed for one pool slot; distinct per round and slot.
pub fn slot_seed(seed: u64, round: u32, slot: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (u64::from(round) << 32 | u64::from(slot))
}

/// Second cascade step: `pool_size` final candidates from the highlight.
///
/// Slots are requested independently and concurrently; each slot gets the
/// provider retry policy, and any slot still failing after that turns the
/// whole call into [`AgentError::PartialPool`].
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    providers: &Providers,
    run_id: &str,
    highlight: &CandidateDesign,
    extra_images: &[Raster],
    primary: Option<&Raster>,
    final_prompt: &str,
    pool_size: u32,
    seed: u64,
    round: u32,
) -> Result<Vec<CandidateDesign>, AgentError> {
    if !(MIN_POOL..=MAX_POOL).contains(&pool_size) {
        return Err(AgentError::Precondition(format!(
            "pool size must be in {MIN_POOL}..={MAX_POOL}, got {pool_size}"
        )));
    }
    if highlight.meta.stage != CandidateStage::Highlight {
        return Err(AgentError::Precondition(
            "cascade input is not a highlight image".into(),
        ));
    }
    let input = primary.unwrap_or(&highlight.image);
    let prompt_hash = sha256_hex(final_prompt.as_bytes());
    let parent = raster_hash(&highlight.image);
    let results: Vec<(u32, Result<Raster, ProviderError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..pool_size)
            .map(|slot| {
                s.spawn(move || {
                    let res = providers
                        .edit_image(EditRequest {
                            image: input.clone(),
                            extra_images: extra_images.to_vec(),
                            system_prompt: None,
                            prompt: final_prompt.to_string(),
                            n: 1,
                            seed: slot_seed(seed, round, slot),
                        })
                        .map(|mut v| v.remove(0));
                    (slot, res)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation thread panicked"))
            .collect()
    });
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (slot, res) in results {
        match res {
            Ok(image) => completed.push(CandidateDesign {
                meta: CandidateMeta {
                    candidate_id: candidate_id(round, slot),
                    run_id: run_id.into(),
                    stage: CandidateStage::Final,
                    parent: Some(parent.clone()),
                    prompt_hash: prompt_hash.clone(),
                    similarity: None,
                    verdict: Verdict::Pending,
                },
                image,
                mask: None,
            }),
            Err(e) => failures.push((slot, e)),
        }
    }
    if failures.is_empty() {
        Ok(completed)
    } else {
        Err(AgentError::PartialPool {
            requested: pool_size,
            completed,
            failures,
        })
    }
}
