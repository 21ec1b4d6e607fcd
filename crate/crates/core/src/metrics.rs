//! Evaluator accuracy per design scenario and the design-quality rubric
//! (visual-fidelity composite, instruction compliance, collapsed accuracy).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::SCENARIO_COUNT;

/// Slack used when comparing weight sums and the composite threshold.
pub const TOLERANCE: f64 = 1e-9;

pub const ACCEPT_COMPOSITE: f64 = 4.0;

pub const EQUAL_WEIGHTS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no pick recorded for cases {0:?}")]
    MissingPicks(Vec<String>),
    #[error("weights must be non-negative and sum to 1 (sum {0})")]
    Weights(String),
    #[error("Likert score {0} outside 1..=5")]
    ScoreRange(u8),
    #[error("accuracy over an empty case list")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub case_id: String,
    pub scenario_id: u8,
    pub correct_candidate_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// `None` for the overall row.
    pub scenario_id: Option<u8>,
    pub cases: u32,
    pub matches: u32,
    /// Accuracy in tenths of a percent, rounded half up.
    pub percent_tenths: u32,
}

impl AccuracyRow {
    fn new(scenario_id: Option<u8>, cases: u32, matches: u32) -> Self {
        let (m, c) = (u64::from(matches), u64::from(cases));
        let percent_tenths = ((2 * m * 1000 + c) / (2 * c)) as u32;
        Self {
            scenario_id,
            cases,
            matches,
            percent_tenths,
        }
    }

    pub fn percent(&self) -> String {
        format_tenths(self.percent_tenths)
    }
}

pub fn format_tenths(tenths: u32) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub overall: Option<AccuracyRow>,
    /// Catalogued scenarios without any labelled case.
    pub omitted: Vec<u8>,
}

impl AccuracyTable {
    pub fn row(&self, scenario_id: u8) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.scenario_id == Some(scenario_id))
    }

    /// Scenario ids over accuracies, with an overall column last.
    pub fn to_text(&self) -> String {
        let mut head = String::from("Design Scenario");
        let mut body = String::from("Eval Acc. (%)  ");
        for row in self.rows.iter().chain(self.overall.iter()) {
            let label = match row.scenario_id {
                Some(id) => format!("{id}"),
                None => String::from("All"),
            };
            let value = row.percent();
            let width = label.len().max(value.len());
            head.push_str(&format!(" | {label:>width$}"));
            body.push_str(&format!(" | {value:>width$}"));
        }
        format!("{head}\n{body}\n")
    }
}

/// Per-scenario share of cases where the pick equals the gold candidate.
pub fn evaluator_accuracy(
    labels: &[GoldLabel],
    picks: &BTreeMap<String, String>,
) -> Result<AccuracyTable, MetricsError> {
    let missing: Vec<String> = labels
        .iter()
        .filter(|l| !picks.contains_key(&l.case_id))
        .map(|l| l.case_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingPicks(missing));
    }
    let mut tally: BTreeMap<u8, (u32, u32)> = BTreeMap::new();
    for label in labels {
        let t = tally.entry(label.scenario_id).or_default();
        t.0 += 1;
        if picks[&label.case_id] == label.correct_candidate_id {
            t.1 += 1;
        }
    }
    let rows: Vec<AccuracyRow> = tally
        .iter()
        .map(|(&id, &(cases, matches))| AccuracyRow::new(Some(id), cases, matches))
        .collect();
    let (cases, matches) = tally.values().fold((0, 0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
    let overall = (cases > 0).then(|| AccuracyRow::new(None, cases, matches));
    let omitted = (1..=SCENARIO_COUNT).filter(|id| !tally.contains_key(id)).collect();
    Ok(AccuracyTable { rows, overall, omitted })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    pub lane_plausibility: u8,
    pub scene_integration: u8,
    pub background_preservation: u8,
    pub background_change_flag: bool,
    pub weights: [f64; 3],
}

impl FidelityScore {
    pub fn new(lane: u8, scene: u8, background: u8) -> Self {
        Self {
            lane_plausibility: lane,
            scene_integration: scene,
            background_preservation: background,
            background_change_flag: false,
            weights: EQUAL_WEIGHTS,
        }
    }

    pub fn scores(&self) -> [u8; 3] {
        [
            self.lane_plausibility,
            self.scene_integration,
            self.background_preservation,
        ]
    }
}

/// Weighted sum of the three Likert sub-scores.
pub fn composite_fidelity(score: &FidelityScore) -> Result<f64, MetricsError> {
    let sum: f64 = score.weights.iter().sum();
    if score.weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > TOLERANCE {
        return Err(MetricsError::Weights(format!("{sum}")));
    }
    if let Some(&bad) = score.scores().iter().find(|s| !(1..=5).contains(*s)) {
        return Err(MetricsError::ScoreRange(bad));
    }
    Ok(score
        .scores()
        .iter()
        .zip(score.weights)
        .map(|(&s, w)| f64::from(s) * w)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintStatus {
    Satisfied,
    Unsatisfied,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComplianceRecord {
    pub hard: BTreeMap<String, ConstraintStatus>,
    pub soft: BTreeMap<String, ConstraintStatus>,
    pub global_adherence: u8,
}

fn satisfied<'a>(it: impl Iterator<Item = &'a ConstraintStatus>) -> (usize, usize) {
    it.fold((0, 0), |(ok, n), s| {
        (ok + usize::from(*s == ConstraintStatus::Satisfied), n + 1)
    })
}

impl ComplianceRecord {
    /// Satisfied over total across hard and soft constraints; 1 when empty.
    pub fn compliance_rate(&self) -> f64 {
        let (ok, n) = satisfied(self.hard.values().chain(self.soft.values()));
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    }

    pub fn soft_rate(&self) -> f64 {
        let (ok, n) = satisfied(self.soft.values());
        if n == 0 {
            1.0
        } else {
            ok as f64 / n as f64
        }
    }

    pub fn all_hard_satisfied(&self) -> bool {
        self.hard.values().all(|s| *s == ConstraintStatus::Satisfied)
    }
}

/// Collapsed rubric: composite at least 4, no background change, every hard
/// constraint met and the soft satisfaction rate at least `soft_minimum`.
pub fn accept_case(fidelity: &FidelityScore, compliance: &ComplianceRecord, soft_minimum: f64) -> bool {
    let Ok(composite) = composite_fidelity(fidelity) else {
        return false;
    };
    composite >= ACCEPT_COMPOSITE - TOLERANCE
        && !fidelity.background_change_flag
        && compliance.all_hard_satisfied()
        && compliance.soft_rate() >= soft_minimum - TOLERANCE
}

pub fn accuracy(cases: &[bool]) -> Result<f64, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(cases.iter().filter(|&&c| c).count() as f64 / cases.len() as f64)
}
