//! Evaluator accuracy against expert gold labels, one case per run.

use std::collections::BTreeMap;
use std::path::Path;

use bikelane_core::metrics::{evaluator_accuracy, AccuracyTable, GoldLabel, MetricsError};
use serde::{Deserialize, Serialize};

use crate::orchestrator::{RunStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("case {case_id} is labelled scenario {labelled} but the run used scenario {actual}")]
    ScenarioMismatch { case_id: String, labelled: u8, actual: u8 },
}

/// Reads a `case_id,scenario_id,correct_candidate_id` CSV with a header row.
pub fn read_labels(path: &Path) -> Result<Vec<GoldLabel>, ReportError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ReportError::Labels(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(|e| ReportError::Labels(e.to_string()))?);
    }
    Ok(out)
}

/// The evaluator's pick per run id, for runs that reached a selection.
pub fn collect_picks(store: &RunStore) -> Result<BTreeMap<String, (u8, String)>, ReportError> {
    let mut picks = BTreeMap::new();
    for id in store.list()? {
        let run = store.load(&id)?;
        if let Some(sel) = run.agent_selection.clone() {
            picks.insert(id, (run.header.scenario_id, sel));
        }
    }
    Ok(picks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub table: AccuracyTable,
    pub text: String,
}

pub fn accuracy_report(
    labels: &[GoldLabel],
    picks: &BTreeMap<String, (u8, String)>,
) -> Result<AccuracyReport, ReportError> {
    for l in labels {
        if let Some((actual, _)) = picks.get(&l.case_id) {
            if *actual != l.scenario_id {
                return Err(ReportError::ScenarioMismatch {
                    case_id: l.case_id.clone(),
                    labelled: l.scenario_id,
                    actual: *actual,
                });
            }
        }
    }
    let flat: BTreeMap<String, String> = picks.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect();
    let table = evaluator_accuracy(labels, &flat)?;
    Ok(AccuracyReport {
        text: table.to_text(),
        table,
    })
}

/// Labels file plus runs directory to a finished report.
pub fn report_from_paths(labels: &Path, runs: &Path) -> Result<AccuracyReport, ReportError> {
    let labels = read_labels(labels)?;
    let picks = collect_picks(&RunStore::new(runs))?;
    accuracy_report(&labels, &picks)
}
