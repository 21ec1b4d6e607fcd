//! Run state machine oracle shared by the property and acceptance suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bikelane_core::workflow::{replay, CheckpointRecord, Decision, LogEntry, ReviseTarget, RunHeader};
use bikelane_core::{CheckpointStage, Disposition, Event, PipelineRun, RunState};

pub const MAX_ROUNDS: u32 = 3;

pub fn record(stage: CheckpointStage, decision: Decision) -> CheckpointRecord {
    CheckpointRecord {
        stage,
        decision,
        editor: "tester".into(),
        payload_before: "before".into(),
        payload_after: if decision == Decision::Edited {
            "after"
        } else {
            "before"
        }
        .into(),
        timestamp: "t".into(),
    }
}

pub fn pool_ids() -> Vec<String> {
    (1..=5).map(|i| format!("c{i}")).collect()
}

/// Every event shape the engine can emit, with representative payloads.
pub fn event_menu(round: u32, all_no: bool) -> Vec<Event> {
    let mut out = vec![Event::Locate, Event::Exclude, Event::OptimizePrompt, Event::Highlight];
    for stage in CheckpointStage::ALL {
        for d in [Decision::Approved, Decision::Edited, Decision::Rejected] {
            out.push(Event::Checkpoint {
                record: record(stage, d),
            });
        }
    }
    out.push(Event::GeneratePool {
        candidates: pool_ids(),
        highlight: "h".into(),
        prompt: "p".into(),
    });
    let advanced: Vec<String> = pool_ids().into_iter().take(3).collect();
    let miss = if round < MAX_ROUNDS {
        Disposition::Regenerate
    } else {
        Disposition::Exhausted
    };
    out.push(Event::Evaluate {
        advanced: advanced.clone(),
        selected: None,
        disposition: miss,
    });
    if !all_no {
        out.push(Event::Evaluate {
            advanced: advanced.clone(),
            selected: Some("c2".into()),
            disposition: Disposition::Selected,
        });
    }
    out.extend([Event::Regenerate, Event::AwaitExpert]);
    for c in [None, Some("c1"), Some("c2"), Some("c5")] {
        out.push(Event::ExpertPick {
            candidate: c.map(String::from),
            record: record(CheckpointStage::Selection, Decision::Approved),
        });
    }
    for target in [ReviseTarget::Description, ReviseTarget::Prompt, ReviseTarget::Highlight] {
        out.push(Event::ExpertRevise { target });
    }
    out.push(Event::Fail {
        stage: "s".into(),
        message: "boom".into(),
    });
    out.push(Event::Resume);
    out
}

/// The transition graph written out independently of the implementation.
pub fn oracle(run: &PipelineRun, event: &Event) -> Option<RunState> {
    use RunState::*;
    let checkpoint = |stage, fwd, back| match event {
        Event::Checkpoint { record } if record.stage == stage => Some(match record.decision {
            Decision::Approved | Decision::Edited => fwd,
            Decision::Rejected => back,
        }),
        _ => None,
    };
    let revise = |target: &ReviseTarget| {
        (run.round < run.header.max_rounds).then_some(match target {
            ReviseTarget::Description => Located,
            ReviseTarget::Prompt => PromptOptimized,
            ReviseTarget::Highlight => Highlighted,
        })
    };
    let executable = matches!(
        run.state,
        Created | DescriptionApproved | PromptApproved | HighlightApproved | PoolGenerated | Evaluated
    );
    if let Event::Fail { .. } = event {
        return executable.then_some(Errored);
    }
    match (run.state, event) {
        (Created, Event::Locate) => Some(Located),
        (Located, Event::Exclude) => Some(Excluded),
        (Located, _) => checkpoint(CheckpointStage::Description, DescriptionApproved, Created),
        (DescriptionApproved, Event::OptimizePrompt) => Some(PromptOptimized),
        (PromptOptimized, _) => checkpoint(CheckpointStage::Prompt, PromptApproved, DescriptionApproved),
        (PromptApproved, Event::Highlight) => Some(Highlighted),
        (Highlighted, _) => checkpoint(CheckpointStage::Highlight, HighlightApproved, PromptApproved),
        (HighlightApproved, Event::GeneratePool { .. }) => Some(PoolGenerated),
        (PoolGenerated, Event::Evaluate { .. }) => Some(Evaluated),
        (Evaluated, Event::Regenerate) => (run.disposition == Some(Disposition::Regenerate)
            && run.round < run.header.max_rounds)
            .then_some(HighlightApproved),
        (Evaluated, Event::AwaitExpert) => {
            (run.disposition != Some(Disposition::Regenerate)).then_some(AwaitingExpertPick)
        }
        (Evaluated, Event::ExpertRevise { target }) if run.disposition != Some(Disposition::Regenerate) => {
            revise(target)
        }
        (AwaitingExpertPick, Event::ExpertPick { candidate, .. }) => match candidate {
            Some(c) if !run.advanced.contains(c) => None,
            Some(c) if run.agent_selection.is_none() || run.agent_selection.as_ref() == Some(c) => Some(Finalized),
            _ => Some(AwaitingExpertPick),
        },
        (AwaitingExpertPick, Event::ExpertRevise { target }) => revise(target),
        (Errored, Event::Resume) => run.resume_state,
        _ => None,
    }
}

pub fn header(max_rounds: u32) -> RunHeader {
    RunHeader {
        run_id: "0123456789abcdef".into(),
        scene_id: "scene".into(),
        scenario_id: 4,
        max_rounds,
        params: BTreeMap::new(),
    }
}

/// A random walk over legal events; returns the log and the final run.
pub fn walk(choices: &[u16], all_no: bool) -> (Vec<LogEntry>, PipelineRun) {
    let (mut run, genesis) = PipelineRun::create(
        header(MAX_ROUNDS),
        BTreeMap::from([("scene.png".into(), "s0".into())]),
        "t0",
    );
    let mut log = vec![genesis];
    for (step, &choice) in choices.iter().enumerate() {
        if run.state.is_terminal() {
            break;
        }
        let legal: Vec<Event> = event_menu(run.round, all_no)
            .into_iter()
            .filter(|e| oracle(&run, e).is_some())
            .collect();
        assert!(!legal.is_empty(), "dead end in {:?}", run.state);
        let event = legal[choice as usize % legal.len()].clone();
        let artifacts = match &event {
            Event::Locate => BTreeMap::from([("locator.json".to_string(), format!("l{step}"))]),
            Event::OptimizePrompt => BTreeMap::from([("prompt.txt".to_string(), format!("p{step}"))]),
            Event::Highlight => BTreeMap::from([("highlight.png".to_string(), format!("h{step}"))]),
            Event::GeneratePool { candidates, .. } => candidates
                .iter()
                .map(|c| (format!("candidates/{c}.png"), format!("{c}-{step}")))
                .collect(),
            Event::Evaluate { .. } => BTreeMap::from([("eval.json".to_string(), format!("e{step}"))]),
            _ => BTreeMap::new(),
        };
        let (next, entry) = run.advance(event, artifacts, format!("t{}", step + 1)).unwrap();
        assert!(next.round <= next.header.max_rounds);
        run = next;
        log.push(entry);
    }
    (log, run)
}

/// Walks `walks` seeded paths and probes every menu event at every visited
/// state against the oracle.
pub fn check_exhaustive(walks: u16) -> Result<usize, String> {
    let mut visited = BTreeMap::new();
    let mut probes = 0;
    for seed in 0..walks {
        let choices: Vec<u16> = (0..60u16)
            .map(|i| seed.wrapping_mul(31).wrapping_add(i * 17) ^ (i << 3))
            .collect();
        let (log, _) = walk(&choices, seed % 5 == 0);
        let mut run = replay(&log[..1]).map_err(|e| e.to_string())?;
        for entry in &log[1..] {
            run = run.apply_entry(entry).map_err(|e| e.to_string())?;
            for event in event_menu(run.round, false) {
                probes += 1;
                match (run.transition(&event), oracle(&run, &event)) {
                    (Ok(next), Some(state)) if next.state == state => {}
                    (Err(_), None) => {}
                    (got, want) => {
                        return Err(format!(
                            "{:?} + {:?}: got {:?}, oracle {:?}",
                            run.state,
                            event.kind(),
                            got.map(|r| r.state),
                            want
                        ))
                    }
                }
            }
            *visited.entry(run.state).or_insert(0u32) += 1;
        }
    }
    match RunState::ALL
        .iter()
        .find(|s| **s != RunState::Created && !visited.contains_key(*s))
    {
        Some(s) => Err(format!("never reached {s:?}")),
        None => Ok(probes),
    }
}
