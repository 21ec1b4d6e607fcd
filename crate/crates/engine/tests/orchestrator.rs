mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use bikelane::config::CheckpointMode;
use bikelane::core::workflow::{Decision, ReviseTarget};
use bikelane::core::{CheckpointStage, Disposition, RunState};
use bikelane::imaging::{encode_png, raster_hash};
use bikelane::orchestrator::{
    CheckpointInput, EngineError, Payload, RunOverrides, StoreError, AUTO_EDITOR, EVAL_JSON, HIGHLIGHT_PNG,
    LOCATOR_JSON, PROMPT_JSON, PROMPT_TXT,
};
use bikelane::providers::mock::{MockJudge, MockReasoner, MockSuite};
use bikelane::providers::{Backend, ProviderError, Request, Response};
use common::{config, engine, engine_with, scene};

fn approve(stage: CheckpointStage) -> CheckpointInput {
    CheckpointInput {
        stage,
        decision: Decision::Approved,
        editor: "reviewer".into(),
        payload: None,
    }
}

fn human(dir: &std::path::Path, suite: MockSuite) -> bikelane::orchestrator::Engine {
    let mut cfg = config(dir);
    cfg.pipeline.checkpoint_mode = CheckpointMode::Human;
    engine_with(cfg, suite)
}

#[test]
fn headless_run_reaches_finalized_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), MockSuite::default());
    let (run, created) = e.create_run(&scene(96, 1), 2, &RunOverrides::default()).unwrap();
    assert!(created);
    let done = e.drive(run.run_id()).unwrap();
    assert_eq!(done.state, RunState::Finalized);
    assert!(done.has_all_checkpoints());
    assert_eq!(done.final_selection, done.agent_selection);
    assert!(done.checkpoints.iter().all(|c| c.editor == AUTO_EDITOR));

    let loaded = e.get(run.run_id()).unwrap();
    assert_eq!(loaded, done);
    assert!(e.store().orphans(&loaded).unwrap().is_empty());

    let (again, created) = e.create_run(&scene(96, 1), 2, &RunOverrides::default()).unwrap();
    assert!(!created);
    assert_eq!(again.version, done.version);

    let views = e.candidates(&done).unwrap();
    assert_eq!(views.len(), 6);
    assert_eq!(views.iter().filter(|v| v.advanced).count(), 3);
    assert_eq!(views.iter().filter(|v| v.agent_selected).count(), 1);
    let report = e.eval_report(&done).unwrap().unwrap();
    assert_eq!(report.compliance.len(), 3);
}

#[test]
fn tampered_artifact_is_named_in_the_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), MockSuite::default());
    let (run, _) = e.create_run(&scene(64, 2), 5, &RunOverrides::default()).unwrap();
    let done = e.drive(run.run_id()).unwrap();
    let path = e.store().run_dir(done.run_id()).join(PROMPT_TXT);
    std::fs::write(&path, b"something else").unwrap();
    match e.get(done.run_id()) {
        Err(EngineError::Store(StoreError::Integrity { artifact, .. })) => assert_eq!(artifact, PROMPT_TXT),
        other => panic!("expected integrity error, got {other:?}"),
    }
    std::fs::remove_file(&path).unwrap();
    match e.get(done.run_id()) {
        Err(EngineError::Store(StoreError::Integrity { artifact, .. })) => assert_eq!(artifact, PROMPT_TXT),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn unknown_and_malformed_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), MockSuite::default());
    for id in ["0123456789abcdef", "../etc", ""] {
        assert!(matches!(e.get(id), Err(EngineError::NotFound(_))), "{id}");
    }
    assert!(e.list().unwrap().is_empty());
}

#[test]
fn pool_size_outside_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), MockSuite::default());
    for n in [0, 4, 11, 50] {
        let o = RunOverrides {
            pool_size: Some(n),
            ..Default::default()
        };
        assert!(
            matches!(e.create_run(&scene(64, 1), 1, &o), Err(EngineError::Validation(_))),
            "{n}"
        );
    }
    for n in [5, 10] {
        let o = RunOverrides {
            pool_size: Some(n),
            ..Default::default()
        };
        assert!(e.create_run(&scene(64, 1), 1, &o).is_ok());
    }
    assert!(matches!(
        e.create_run(&scene(64, 1), 9, &RunOverrides::default()),
        Err(EngineError::Validation(_))
    ));
}

#[test]
fn absent_lane_excludes_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(64, 3);
    let reasoner = MockReasoner {
        table: BTreeMap::from([(
            raster_hash(&s.image),
            "There is no bike lane in this image.".to_string(),
        )]),
        fallback: true,
    };
    let e = engine(
        dir.path(),
        MockSuite {
            reasoner: Arc::new(reasoner),
            ..MockSuite::default()
        },
    );
    let (run, _) = e.create_run(&s, 3, &RunOverrides::default()).unwrap();
    let done = e.drive(run.run_id()).unwrap();
    assert_eq!(done.state, RunState::Excluded);
    let names: Vec<&String> = done.artifacts.keys().collect();
    assert_eq!(names, ["locator.json", "scene.json", "scene.png"]);
    let on_disk: Vec<String> = walk(&e.store().run_dir(done.run_id()));
    assert_eq!(on_disk, ["locator.json", "run.log", "scene.json", "scene.png"]);
    assert!(matches!(
        e.execute_stage(done.run_id(), None),
        Err(EngineError::NotExecutable(RunState::Excluded))
    ));
}

fn walk(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type().unwrap().is_dir() {
            out.extend(walk(&entry.path()).into_iter().map(|n| format!("{name}/{n}")));
        } else {
            out.push(name);
        }
    }
    out.sort();
    out
}

/// Fails the first `failures` edit calls with a non-retryable error.
struct Flaky {
    inner: Arc<dyn Backend>,
    failures: usize,
    calls: AtomicUsize,
}

impl Backend for Flaky {
    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err(ProviderError::Upstream {
                status: 500,
                body: "down".into(),
            });
        }
        self.inner.call(request)
    }
}

#[test]
fn errored_run_resumes_only_the_failed_stage() {
    let dir = tempfile::tempdir().unwrap();
    let base = MockSuite::default();
    let flaky = Arc::new(Flaky {
        inner: base.editor.clone(),
        failures: 1,
        calls: AtomicUsize::new(0),
    });
    let e = engine(
        dir.path(),
        MockSuite {
            editor: flaky.clone(),
            ..base
        },
    );
    let (run, _) = e.create_run(&scene(64, 4), 6, &RunOverrides::default()).unwrap();
    let err = e.drive(run.run_id()).unwrap_err();
    assert!(
        matches!(
            err,
            EngineError::Stage {
                stage: "highlight",
                provider: true,
                ..
            }
        ),
        "{err:?}"
    );
    let failed = e.get(run.run_id()).unwrap();
    assert_eq!(failed.state, RunState::Errored);
    assert_eq!(failed.resume_state, Some(RunState::PromptApproved));
    let locator = failed.artifacts[LOCATOR_JSON].clone();
    let prompt = failed.artifacts[PROMPT_JSON].clone();
    let log_before = e.store().read_log(run.run_id()).unwrap().len();

    // Driving alone leaves an errored run where it is.
    assert_eq!(e.drive(run.run_id()).unwrap().state, RunState::Errored);
    let resumed = e.execute_stage(run.run_id(), Some(failed.version)).unwrap();
    assert_eq!(resumed.state, RunState::Highlighted);
    let done = e.drive(run.run_id()).unwrap();
    assert_eq!(done.state, RunState::Finalized);
    assert_eq!(done.artifacts[LOCATOR_JSON], locator);
    assert_eq!(done.artifacts[PROMPT_JSON], prompt);
    let log = e.store().read_log(run.run_id()).unwrap();
    let kinds: Vec<String> = log[log_before..]
        .iter()
        .map(|l| {
            serde_json::to_value(l).unwrap()["event"]["type"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds[..2], ["resume", "highlight"]);
    assert!(!kinds.contains(&"locate".to_string()));
    assert!(!kinds.contains(&"optimize_prompt".to_string()));
}

#[test]
fn human_checkpoints_edit_reject_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let e = human(dir.path(), MockSuite::default());
    let (run, _) = e.create_run(&scene(64, 5), 7, &RunOverrides::default()).unwrap();
    let id = run.run_id().to_string();
    let r = e.drive(&id).unwrap();
    assert_eq!(r.state, RunState::Located);
    assert_eq!(e.drive(&id).unwrap().version, r.version);

    // Wrong stage.
    assert!(e.checkpoint(&id, approve(CheckpointStage::Prompt), None).is_err());

    // Edit the description.
    let mut lane = e.lane_description(&r).unwrap().unwrap();
    lane.raw_text = format!("{} Edited by hand.", lane.raw_text);
    let edit = CheckpointInput {
        stage: CheckpointStage::Description,
        decision: Decision::Edited,
        editor: "ana".into(),
        payload: Some(Payload::Description(lane.clone())),
    };
    let r = e.checkpoint(&id, edit, Some(r.version)).unwrap();
    assert_eq!(r.state, RunState::DescriptionApproved);
    assert_eq!(e.lane_description(&r).unwrap().unwrap(), lane);
    let rec = r.checkpoints.last().unwrap();
    assert_ne!(rec.payload_before, rec.payload_after);
    assert!(r
        .artifacts
        .keys()
        .any(|k| k.starts_with("stale/") && k.ends_with(LOCATOR_JSON)));

    // Re-posting the same approval once past the stage changes nothing.
    let r2 = e.drive(&id).unwrap();
    assert_eq!(r2.state, RunState::PromptOptimized);
    let repeat = e
        .checkpoint(
            &id,
            CheckpointInput {
                stage: CheckpointStage::Description,
                decision: Decision::Edited,
                editor: "ana".into(),
                payload: Some(Payload::Description(lane)),
            },
            None,
        )
        .unwrap();
    assert_eq!(repeat.version, r2.version);

    // Reject the prompt: back to prompt optimization, prompt archived.
    let rejected = e
        .checkpoint(
            &id,
            CheckpointInput {
                stage: CheckpointStage::Prompt,
                decision: Decision::Rejected,
                editor: "ana".into(),
                payload: None,
            },
            Some(r2.version),
        )
        .unwrap();
    assert_eq!(rejected.state, RunState::DescriptionApproved);
    assert!(!rejected.artifacts.contains_key(PROMPT_TXT));
    assert!(rejected.artifacts.keys().any(|k| k.ends_with(PROMPT_TXT)));

    // Edited prompt is recomposed into the final prompt.
    let r3 = e.drive(&id).unwrap();
    let edit = CheckpointInput {
        stage: CheckpointStage::Prompt,
        decision: Decision::Edited,
        editor: "ana".into(),
        payload: Some(Payload::Prompt("Paint a narrow lane on the right.".into())),
    };
    let r4 = e.checkpoint(&id, edit, Some(r3.version)).unwrap();
    let rec = e.prompt_record(&r4).unwrap().unwrap();
    assert!(rec.edited);
    assert!(rec.final_prompt.starts_with("Paint a narrow lane on the right."));
    assert!(rec
        .final_prompt
        .ends_with("The highlighted regions represent bike lanes."));

    // Highlight edits must keep the scene size.
    let r5 = e.drive(&id).unwrap();
    assert_eq!(r5.state, RunState::Highlighted);
    let bad = CheckpointInput {
        stage: CheckpointStage::Highlight,
        decision: Decision::Edited,
        editor: "ana".into(),
        payload: Some(Payload::Highlight(bikelane::synth::street_scene(32, 32, 0))),
    };
    assert!(matches!(e.checkpoint(&id, bad, None), Err(EngineError::Validation(_))));
    let r6 = e.checkpoint(&id, approve(CheckpointStage::Highlight), None).unwrap();
    assert_eq!(r6.state, RunState::HighlightApproved);
    let r7 = e.drive(&id).unwrap();
    assert_eq!(r7.state, RunState::AwaitingExpertPick);
    assert!(e.store().orphans(&r7).unwrap().is_empty());
    assert_eq!(e.get(&id).unwrap(), r7);
}

#[test]
fn expert_disagreement_revises_and_consumes_a_round() {
    let dir = tempfile::tempdir().unwrap();
    let e = human(dir.path(), MockSuite::default());
    let (run, _) = e.create_run(&scene(64, 6), 1, &RunOverrides::default()).unwrap();
    let id = run.run_id().to_string();
    let mut r = e.drive(&id).unwrap();
    while r.state != RunState::AwaitingExpertPick {
        e.checkpoint(&id, approve(r.state.checkpoint().unwrap()), None).unwrap();
        r = e.drive(&id).unwrap();
    }
    let agent = r.agent_selection.clone().unwrap();
    let other = r.advanced.iter().find(|c| **c != agent).unwrap().clone();

    // Only advanced candidates may be picked.
    let outsider = r.candidates.iter().find(|c| !r.advanced.contains(c)).unwrap().clone();
    assert!(matches!(
        e.expert_pick(&id, Some(outsider), "ana", None),
        Err(EngineError::Transition(_))
    ));

    let r = e.expert_pick(&id, Some(other), "ana", Some(r.version)).unwrap();
    assert_eq!(r.state, RunState::AwaitingExpertPick);
    assert!(r.awaiting_revise_target);
    assert_eq!(r.checkpoints.last().unwrap().decision, Decision::Edited);

    let r = e.revise(&id, ReviseTarget::Highlight, Some(r.version)).unwrap();
    assert_eq!(r.state, RunState::Highlighted);
    assert_eq!(r.round, 2);
    assert!(!r.artifacts.contains_key(EVAL_JSON));
    assert!(r.artifacts.contains_key(HIGHLIGHT_PNG));
    assert!(r.candidates.is_empty());
    assert!(e.store().orphans(&r).unwrap().is_empty());

    e.checkpoint(&id, approve(CheckpointStage::Highlight), None).unwrap();
    let r = e.drive(&id).unwrap();
    assert_eq!(r.state, RunState::AwaitingExpertPick);
    assert!(r.candidates.iter().all(|c| c.starts_with("r2-")), "{:?}", r.candidates);
    let agent = r.agent_selection.clone().unwrap();
    let r = e.expert_pick(&id, Some(agent.clone()), "ana", None).unwrap();
    assert_eq!(r.state, RunState::Finalized);
    assert_eq!(r.final_selection, Some(agent));
}

#[test]
fn stale_version_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let e = human(dir.path(), MockSuite::default());
    let (run, _) = e.create_run(&scene(64, 7), 4, &RunOverrides::default()).unwrap();
    let r = e.drive(run.run_id()).unwrap();
    let err = e
        .checkpoint(run.run_id(), approve(CheckpointStage::Description), Some(r.version - 1))
        .unwrap_err();
    assert!(matches!(err, EngineError::VersionConflict { .. }), "{err:?}");
    assert!(matches!(
        e.execute_stage(run.run_id(), Some(1)),
        Err(EngineError::VersionConflict { expected: 1, .. })
    ));
    // Nothing executable while waiting on a human.
    assert!(matches!(
        e.execute_stage(run.run_id(), None),
        Err(EngineError::NotExecutable(RunState::Located))
    ));
}

#[test]
fn all_no_verdicts_exhaust_the_round_budget() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(
        dir.path(),
        MockSuite {
            judge: Arc::new(MockJudge::always("no")),
            ..MockSuite::default()
        },
    );
    let (run, _) = e.create_run(&scene(64, 8), 8, &RunOverrides::default()).unwrap();
    let done = e.drive(run.run_id()).unwrap();
    assert_eq!(done.round, done.header.max_rounds);
    assert_eq!(done.disposition, Some(Disposition::Exhausted));
    assert_eq!(done.agent_selection, None);
    // The auto expert takes the best advanced candidate.
    assert_eq!(done.state, RunState::Finalized);
    assert!(done.final_selection.as_deref().unwrap().starts_with("r3-"));
    let archived = done.artifacts.keys().filter(|k| k.starts_with("stale/")).count();
    assert!(archived > 0);
}

#[test]
fn concurrent_drivers_do_not_corrupt_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let e = Arc::new(engine(dir.path(), MockSuite::default()));
    let (run, _) = e.create_run(&scene(64, 9), 3, &RunOverrides::default()).unwrap();
    let id = run.run_id().to_string();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (e, id) = (e.clone(), id.clone());
            std::thread::spawn(move || e.drive(&id).map(|r| r.state))
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap(), RunState::Finalized);
    }
    let r = e.get(&id).unwrap();
    assert_eq!(r.state, RunState::Finalized);
    assert!(e.store().orphans(&r).unwrap().is_empty());
}

#[test]
fn images_are_served_by_hash() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(dir.path(), MockSuite::default());
    let s = scene(64, 10);
    let (run, _) = e.create_run(&s, 2, &RunOverrides::default()).unwrap();
    let png = encode_png(&s.image);
    let hash = run.artifacts["scene.png"].clone();
    assert_eq!(e.image_by_hash(&run, &hash).unwrap(), png);
    assert!(matches!(e.image_by_hash(&run, "00"), Err(EngineError::NotFound(_))));
}
