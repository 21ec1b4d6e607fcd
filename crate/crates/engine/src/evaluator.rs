//! Masked-embedding re-ranking against a reference design, then a binary
//! compliance check on the top candidates.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use bikelane_core::domain::{compliance_checklist, CandidateDesign, DesignScenario, Verdict};
use bikelane_core::evaluate::{parse_verdict, select_final, SelectError, VerdictMode};
use bikelane_core::template::{self, RenderedPrompt, TemplateError};
use bikelane_core::{
    apply_mask, cosine_similarity, top_k, Disposition, Embedding, Mask, RankedEntry, RankedPool, Raster, Rgb,
    SelectionOutcome,
};
use serde::{Deserialize, Serialize};

use crate::imaging::mask_hash;
use crate::providers::{JudgeRequest, ProviderError, Providers};
use crate::templates::TemplateSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reference design: {0}")]
    Reference(ProviderError),
    #[error("reference design: {0}")]
    ReferenceEmbedding(#[from] bikelane_core::evaluate::EmbeddingError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("judging {candidate}: {source}")]
    Judge {
        candidate: String,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("candidate {0} is not a final-stage design from this run")]
    NotFinal(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub fill: Rgb,
    pub top_k: NonZeroUsize,
    pub mode: VerdictMode,
    pub max_rounds: u32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            fill: Rgb::MID_GRAY,
            top_k: bikelane_core::evaluate::DEFAULT_TOP_K,
            mode: VerdictMode::Lenient,
            max_rounds: bikelane_core::evaluate::DEFAULT_MAX_ROUNDS,
        }
    }
}

/// Segmentation and embedding of one image.
#[derive(Debug, Clone)]
pub struct Isolated {
    pub mask: Mask,
    pub empty_mask: bool,
    pub embedding: Embedding,
}

/// Segment, fill everything outside the mask, embed.
pub fn isolate(providers: &Providers, image: &Raster, fill: Rgb) -> Result<Isolated, ProviderError> {
    let seg = providers.segment(image)?;
    let masked = apply_mask(image, &seg.mask, fill).map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
    Ok(Isolated {
        embedding: providers.embed(&masked)?,
        empty_mask: seg.empty,
        mask: seg.mask,
    })
}

/// Per-candidate scoring detail kept for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDetail {
    pub candidate_id: String,
    pub similarity: Option<f64>,
    pub empty_mask: bool,
    pub mask_sha256: Option<String>,
    pub error: Option<String>,
}

/// Ranked pool plus masks of the candidates that were scored.
#[derive(Debug, Clone)]
pub struct Ranking {
    pub pool: RankedPool,
    pub details: Vec<ScoreDetail>,
    pub masks: BTreeMap<String, Mask>,
}

/// Scores every candidate against the masked reference and sorts them.
/// Candidates whose providers fail are kept, unscored, at the bottom.
pub fn rank_pool(
    providers: &Providers,
    candidates: &[CandidateDesign],
    reference: &Raster,
    reference_image_id: &str,
    fill: Rgb,
) -> Result<Ranking, EvalError> {
    if let Some(c) = candidates
        .iter()
        .find(|c| c.meta.stage != bikelane_core::domain::CandidateStage::Final)
    {
        return Err(EvalError::NotFinal(c.id().to_string()));
    }
    if let Some(first) = candidates.first() {
        if let Some(c) = candidates.iter().find(|c| c.meta.run_id != first.meta.run_id) {
            return Err(EvalError::NotFinal(c.id().to_string()));
        }
    }
    let reference = isolate(providers, reference, fill).map_err(EvalError::Reference)?;
    let scored: Vec<Result<Isolated, ProviderError>> = std::thread::scope(|s| {
        let handles: Vec<_> = candidates
            .iter()
            .map(|c| s.spawn(move || isolate(providers, &c.image, fill)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });

    let mut entries = Vec::new();
    let mut details = Vec::new();
    let mut masks = BTreeMap::new();
    for (c, res) in candidates.iter().zip(scored) {
        let id = c.id().to_string();
        let detail = match res.and_then(|iso| {
            cosine_similarity(&iso.embedding, &reference.embedding)
                .map(|sim| (iso, sim))
                .map_err(|e| ProviderError::MalformedResponse(e.to_string()))
        }) {
            Ok((iso, sim)) => {
                let d = ScoreDetail {
                    candidate_id: id.clone(),
                    similarity: Some(sim),
                    empty_mask: iso.empty_mask,
                    mask_sha256: Some(mask_hash(&iso.mask)),
                    error: None,
                };
                masks.insert(id.clone(), iso.mask);
                d
            }
            Err(e) => ScoreDetail {
                candidate_id: id.clone(),
                similarity: None,
                empty_mask: false,
                mask_sha256: None,
                error: Some(e.to_string()),
            },
        };
        entries.push(RankedEntry {
            candidate_id: id,
            similarity: detail.similarity,
            empty_mask: detail.empty_mask,
        });
        details.push(detail);
    }
    details.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    Ok(Ranking {
        pool: RankedPool::new(reference_image_id, true, entries),
        details,
        masks,
    })
}

pub fn compliance_request(templates: &TemplateSet, scenario: &DesignScenario) -> Result<RenderedPrompt, TemplateError> {
    let checklist = compliance_checklist(scenario);
    templates
        .compliance
        .render(&BTreeMap::from([(template::CHECKLIST, checklist.as_str())]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceCheck {
    pub verdict: Verdict,
    /// The answer needed normalization, or could not be parsed at all.
    pub flagged: bool,
    /// Raw judge answers, one per attempt.
    pub raw: Vec<String>,
}

/// Asks the judge whether `candidate` meets the scenario checklist. An
/// unparseable answer is retried once and then counts as "no", flagged.
pub fn check_compliance(
    providers: &Providers,
    request: &RenderedPrompt,
    candidate: &Raster,
    final_prompt: &str,
    reference: &Raster,
    mode: VerdictMode,
) -> Result<ComplianceCheck, ProviderError> {
    let mut raw = Vec::new();
    for _ in 0..2 {
        let answer = providers.judge(JudgeRequest {
            image: candidate.clone(),
            reference: Some(reference.clone()),
            system_prompt: request.system.clone(),
            prompt: request.user.clone(),
            final_prompt: Some(final_prompt.to_string()),
        })?;
        let parsed = parse_verdict(&answer, mode);
        raw.push(answer);
        if let Ok(p) = parsed {
            return Ok(ComplianceCheck {
                verdict: p.verdict,
                flagged: p.flagged,
                raw,
            });
        }
    }
    Ok(ComplianceCheck {
        verdict: Verdict::No,
        flagged: true,
        raw,
    })
}

/// Everything written to `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub round: u32,
    pub reference_image_id: String,
    pub masked: bool,
    pub mask_fill: [u8; 3],
    /// Ranked order, best first.
    pub ranking: Vec<RankedEntry>,
    pub scores: Vec<ScoreDetail>,
    pub advanced: Vec<String>,
    pub compliance: BTreeMap<String, ComplianceCheck>,
    pub disposition: Disposition,
    pub selected: Option<String>,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub outcome: SelectionOutcome,
    pub masks: BTreeMap<String, Mask>,
}

/// Rank, advance the top k, judge only those, then select.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pool(
    providers: &Providers,
    templates: &TemplateSet,
    scenario: &DesignScenario,
    candidates: &[CandidateDesign],
    reference: &Raster,
    final_prompt: &str,
    settings: &EvalSettings,
    round: u32,
) -> Result<Evaluation, EvalError> {
    let ranking = rank_pool(
        providers,
        candidates,
        reference,
        &scenario.reference_image_id,
        settings.fill,
    )?;
    let advanced = top_k(&ranking.pool, settings.top_k);
    let request = compliance_request(templates, scenario)?;
    let by_id: BTreeMap<&str, &CandidateDesign> = candidates.iter().map(|c| (c.id(), c)).collect();
    let checks: Vec<(String, Result<ComplianceCheck, ProviderError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = advanced
            .iter()
            .map(|id| {
                let image = &by_id[id.as_str()].image;
                let request = &request;
                s.spawn(move || {
                    let r = check_compliance(providers, request, image, final_prompt, reference, settings.mode);
                    (id.clone(), r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("judge thread panicked"))
            .collect()
    });
    let mut compliance = BTreeMap::new();
    for (id, res) in checks {
        let check = res.map_err(|source| EvalError::Judge {
            candidate: id.clone(),
            source,
        })?;
        compliance.insert(id, check);
    }
    let verdicts: BTreeMap<String, Verdict> = compliance.iter().map(|(k, v)| (k.clone(), v.verdict)).collect();
    let outcome = select_final(&ranking.pool, &verdicts, settings.top_k, round, settings.max_rounds)?;
    let report = EvalReport {
        round,
        reference_image_id: scenario.reference_image_id.clone(),
        masked: ranking.pool.masked,
        mask_fill: settings.fill.0,
        ranking: ranking.pool.entries.clone(),
        scores: ranking.details,
        advanced,
        compliance,
        disposition: outcome.disposition,
        selected: outcome.selected.clone(),
    };
    Ok(Evaluation {
        report,
        outcome,
        masks: ranking.masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::{JudgePolicy, MockJudge, MockSuite};
    use crate::providers::{Backend, Request, Response, VirtualClock};
    use crate::synth;
    use bikelane_core::domain::{scenario, CandidateMeta, CandidateStage};
    use std::sync::{Arc, Mutex};

    fn cand(id: &str, img: Raster) -> CandidateDesign {
        CandidateDesign {
            meta: CandidateMeta {
                candidate_id: id.into(),
                run_id: "run".into(),
                stage: CandidateStage::Final,
                parent: Some("h".into()),
                prompt_hash: "p".into(),
                similarity: None,
                verdict: Verdict::Pending,
            },
            image: img,
            mask: None,
        }
    }

    fn providers(judge: MockJudge) -> Providers {
        let suite = MockSuite {
            judge: Arc::new(judge),
            ..MockSuite::default()
        };
        let mut b = Providers::builder().sleeper(Arc::new(VirtualClock::default()));
        for cap in crate::providers::Capability::ALL {
            b = b.backend(cap, suite.get(cap), 4);
        }
        b.build().unwrap()
    }

    fn pool() -> Vec<CandidateDesign> {
        let s = scenario(2).unwrap();
        let reference = synth::reference_design(&s, 64);
        let mut out = vec![cand("a", reference.clone())];
        for (i, scen) in [5u8, 3, 7, 8].into_iter().enumerate() {
            let img = synth::reference_design(&scenario(scen).unwrap(), 64);
            out.push(cand(&format!("b{i}"), img));
        }
        out
    }

    #[test]
    fn identical_candidate_ranks_first() {
        let p = providers(MockJudge::always("yes"));
        let s = scenario(2).unwrap();
        let reference = synth::reference_design(&s, 64);
        let r = rank_pool(&p, &pool(), &reference, "ds2", Rgb::MID_GRAY).unwrap();
        assert_eq!(r.pool.entries[0].candidate_id, "a");
        assert!((r.pool.entries[0].similarity.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.pool.masked);
        assert_eq!(r.masks.len(), 5);
    }

    #[test]
    fn only_advanced_are_judged() {
        struct Counting(MockJudge, Mutex<Vec<String>>);
        impl Backend for Counting {
            fn call(&self, r: &Request) -> Result<Response, ProviderError> {
                if let Request::Judge(j) = r {
                    self.1.lock().unwrap().push(crate::imaging::raster_hash(&j.image));
                }
                self.0.call(r)
            }
        }
        let counting = Arc::new(Counting(MockJudge::always("no"), Mutex::new(Vec::new())));
        let suite = MockSuite::default();
        let mut b = Providers::builder().sleeper(Arc::new(VirtualClock::default()));
        for cap in crate::providers::Capability::ALL {
            let backend: Arc<dyn Backend> = if cap == crate::providers::Capability::Judge {
                counting.clone()
            } else {
                suite.get(cap)
            };
            b = b.backend(cap, backend, 4);
        }
        let p = b.build().unwrap();
        let s = scenario(2).unwrap();
        let reference = synth::reference_design(&s, 64);
        let candidates = pool();
        let e = evaluate_pool(
            &p,
            &TemplateSet::builtin(),
            &s,
            &candidates,
            &reference,
            "fp",
            &EvalSettings::default(),
            1,
        )
        .unwrap();
        assert_eq!(e.report.advanced.len(), 3);
        // "no" is judged once per advanced candidate (parseable, no retry).
        assert_eq!(counting.1.lock().unwrap().len(), 3);
        assert_eq!(e.outcome.disposition, Disposition::Regenerate);
        assert!(e.report.compliance.keys().all(|k| e.report.advanced.contains(k)));
    }

    #[test]
    fn unparseable_is_retried_then_no() {
        let p = providers(MockJudge {
            table: BTreeMap::new(),
            policy: JudgePolicy::Always("the lane looks fine".into()),
        });
        let s = scenario(4).unwrap();
        let req = compliance_request(&TemplateSet::builtin(), &s).unwrap();
        assert!(req.user.contains("dome-shaped, black with white reflective stripes"));
        let img = synth::street_scene(16, 16, 0);
        let c = check_compliance(&p, &req, &img, "fp", &img, VerdictMode::Lenient).unwrap();
        assert_eq!(c.verdict, Verdict::No);
        assert!(c.flagged);
        assert_eq!(c.raw.len(), 2);

        let p = providers(MockJudge::always("Yes."));
        let c = check_compliance(&p, &req, &img, "fp", &img, VerdictMode::Lenient).unwrap();
        assert_eq!((c.verdict, c.flagged, c.raw.len()), (Verdict::Yes, true, 1));
    }

    #[test]
    fn failing_candidate_ranks_last() {
        struct FailOn(String);
        impl Backend for FailOn {
            fn call(&self, r: &Request) -> Result<Response, ProviderError> {
                match r {
                    Request::Segment(img) if crate::imaging::raster_hash(img) == self.0 => {
                        Err(ProviderError::MalformedResponse("boom".into()))
                    }
                    _ => MockSuite::default().get(r.capability()).call(r),
                }
            }
        }
        let candidates = pool();
        let bad = crate::imaging::raster_hash(&candidates[0].image);
        let p = Providers::builder()
            .all(Arc::new(FailOn(bad)))
            .sleeper(Arc::new(VirtualClock::default()))
            .build()
            .unwrap();
        let reference = synth::reference_design(&scenario(3).unwrap(), 64);
        let r = rank_pool(&p, &candidates, &reference, "ds3", Rgb::MID_GRAY).unwrap();
        let last = r.pool.entries.last().unwrap();
        assert_eq!(last.candidate_id, "a");
        assert!(last.similarity.is_none());
        assert!(r.details.iter().any(|d| d.error.is_some()));
    }
}
