//! Core vocabulary: scenes, boundary specifications, the design-scenario
//! catalog and the records that flow between pipeline stages.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::raster::{Mask, Raster};

/// Side length of imagery fetched from the street-view API.
pub const STREET_VIEW_SIZE: u32 = 1024;

/// Word budget for optimized prompts before a length warning is raised.
pub const MAX_PROMPT_WORDS: usize = 130;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    StreetViewApi,
    LocalFile,
}

/// Geo and camera metadata of one capture. Pixels travel separately in
/// [`StreetScene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub heading: f64,
    pub pitch: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    pub source: SceneSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreetScene {
    pub meta: SceneMeta,
    pub image: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneRule {
    #[error("image dimensions differ from recorded metadata")]
    Dimensions,
    #[error("street-view captures must be 1024x1024")]
    Resolution,
    #[error("heading must lie in [0, 360)")]
    HeadingRange,
    #[error("latitude must lie in [-90, 90]")]
    LatitudeRange,
    #[error("longitude must lie in [-180, 180]")]
    LongitudeRange,
    #[error("camera parameters must be finite")]
    NonFinite,
    #[error("pitch, fov and size must be identical across a batch")]
    BatchMismatch,
}

/// Wraps any finite heading into `[0, 360)`.
pub fn normalize_heading(degrees: f64) -> f64 {
    let wrapped = libm::fmod(degrees, 360.0);
    let wrapped = if wrapped < 0.0 { wrapped + 360.0 } else { wrapped };
    // -1e-20 % 360 + 360 rounds to 360.0
    if wrapped >= 360.0 {
        0.0
    } else {
        wrapped
    }
}

/// Accepts the scene iff every invariant holds, reporting the first broken rule.
pub fn validate_scene(scene: &StreetScene) -> Result<(), SceneRule> {
    let m = &scene.meta;
    if !(m.latitude.is_finite()
        && m.longitude.is_finite()
        && m.heading.is_finite()
        && m.pitch.is_finite()
        && m.fov.is_finite())
    {
        return Err(SceneRule::NonFinite);
    }
    if scene.image.dimensions() != (m.width, m.height) {
        return Err(SceneRule::Dimensions);
    }
    if m.source == SceneSource::StreetViewApi && (m.width != STREET_VIEW_SIZE || m.height != STREET_VIEW_SIZE) {
        return Err(SceneRule::Resolution);
    }
    if !(0.0..360.0).contains(&m.heading) {
        return Err(SceneRule::HeadingRange);
    }
    if !(-90.0..=90.0).contains(&m.latitude) {
        return Err(SceneRule::LatitudeRange);
    }
    if !(-180.0..=180.0).contains(&m.longitude) {
        return Err(SceneRule::LongitudeRange);
    }
    Ok(())
}

/// Pitch, fov and size must agree across one acquisition batch.
pub fn validate_batch(scenes: &[SceneMeta]) -> Result<(), SceneRule> {
    let Some(first) = scenes.first() else {
        return Ok(());
    };
    let same = scenes
        .iter()
        .all(|s| s.pitch == first.pitch && s.fov == first.fov && s.width == first.width && s.height == first.height);
    if same {
        Ok(())
    } else {
        Err(SceneRule::BatchMismatch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    DirectMovingLane,
    DirectParkedCars,
    DirectEdge,
    PaintedBuffer,
    BollardBuffer,
    ArmadilloBuffer,
}

impl BoundaryKind {
    pub const ALL: [BoundaryKind; 6] = [
        BoundaryKind::DirectMovingLane,
        BoundaryKind::DirectParkedCars,
        BoundaryKind::DirectEdge,
        BoundaryKind::PaintedBuffer,
        BoundaryKind::BollardBuffer,
        BoundaryKind::ArmadilloBuffer,
    ];

    pub fn buffer_width_ft(self) -> f64 {
        match self {
            BoundaryKind::DirectMovingLane | BoundaryKind::DirectParkedCars | BoundaryKind::DirectEdge => 0.0,
            BoundaryKind::PaintedBuffer => 3.0,
            BoundaryKind::BollardBuffer | BoundaryKind::ArmadilloBuffer => 1.5,
        }
    }

    pub fn is_buffer(self) -> bool {
        self.buffer_width_ft() > 0.0
    }

    /// Table wording for this boundary, lower-cased at the start.
    pub fn description(self) -> &'static str {
        match self {
            BoundaryKind::DirectMovingLane => "no buffer; direct adjacency to moving lane",
            BoundaryKind::DirectParkedCars => "no buffer; direct adjacency to parked cars",
            BoundaryKind::DirectEdge => "no buffer; direct edge (no separator)",
            BoundaryKind::PaintedBuffer => "3 ft white-painted buffer",
            BoundaryKind::BollardBuffer => "1.5 ft buffer with bollards",
            BoundaryKind::ArmadilloBuffer => "1.5 ft buffer with armadillo lane dividers",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    pub buffer_width_ft: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("{kind:?} requires a {expected} ft buffer, got {actual}")]
pub struct BoundaryError {
    pub kind: BoundaryKind,
    pub expected: f64,
    pub actual: f64,
}

impl BoundarySpec {
    pub fn new(kind: BoundaryKind) -> Self {
        Self {
            kind,
            buffer_width_ft: kind.buffer_width_ft(),
        }
    }

    pub fn validate(&self) -> Result<(), BoundaryError> {
        let expected = self.kind.buffer_width_ft();
        if self.buffer_width_ft == expected {
            Ok(())
        } else {
            Err(BoundaryError {
                kind: self.kind,
                expected,
                actual: self.buffer_width_ft,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn label(self) -> &'static str {
        match self {
            Side::Left => "Left",
            Side::Right => "Right",
        }
    }
}

pub fn render_boundary_clause(spec: &BoundarySpec, side: Side) -> String {
    format!("{} boundary: {}", side.label(), spec.kind.description())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignScenario {
    pub scenario_id: u8,
    pub left: BoundarySpec,
    pub right: BoundarySpec,
    pub reference_image_id: String,
    pub prompt_fragment: String,
}

impl DesignScenario {
    fn from_kinds(scenario_id: u8, left: BoundaryKind, right: BoundaryKind) -> Self {
        let left = BoundarySpec::new(left);
        let right = BoundarySpec::new(right);
        let prompt_fragment = format!(
            "{}\n{}",
            render_boundary_clause(&left, Side::Left),
            render_boundary_clause(&right, Side::Right)
        );
        Self {
            scenario_id,
            left,
            right,
            reference_image_id: format!("ds{scenario_id}"),
            prompt_fragment,
        }
    }

    pub fn boundary(&self, side: Side) -> &BoundarySpec {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

pub const SCENARIO_COUNT: u8 = 8;

/// The eight catalogued design scenarios, ids ascending.
pub fn scenario_catalog() -> Vec<DesignScenario> {
    use BoundaryKind::*;
    [
        (DirectMovingLane, DirectParkedCars),
        (DirectMovingLane, PaintedBuffer),
        (DirectMovingLane, BollardBuffer),
        (DirectMovingLane, ArmadilloBuffer),
        (DirectMovingLane, DirectEdge),
        (PaintedBuffer, DirectEdge),
        (BollardBuffer, DirectEdge),
        (ArmadilloBuffer, DirectEdge),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (l, r))| DesignScenario::from_kinds(i as u8 + 1, l, r))
    .collect()
}

pub fn scenario(id: u8) -> Option<DesignScenario> {
    if (1..=SCENARIO_COUNT).contains(&id) {
        scenario_catalog().into_iter().nth(id as usize - 1)
    } else {
        None
    }
}

fn checklist_items(kind: BoundaryKind, side: Side) -> Vec<&'static str> {
    const BUFFER: [&str; 3] = [
        "Narrow buffer zone adjacent to the bike lane.",
        "Buffer zone bounded by solid white lines on both sides.",
        "Prominent diagonal white stripes filling the buffer zone.",
    ];
    let mut items = Vec::new();
    match kind {
        BoundaryKind::DirectMovingLane => {
            items.push("Prominent continuous solid white line separating the bike lane from motor-vehicle lanes.")
        }
        BoundaryKind::DirectParkedCars => {
            items.push("Prominent continuous solid white line separating the bike lane from parked cars.")
        }
        BoundaryKind::DirectEdge => items.push(match side {
            Side::Left => "Prominent continuous solid white line marking the left-hand edge of the bike lane.",
            Side::Right => "Prominent continuous solid white line marking the right-hand edge of the bike lane.",
        }),
        BoundaryKind::PaintedBuffer => items.extend_from_slice(&BUFFER),
        BoundaryKind::BollardBuffer => {
            items.extend_from_slice(&BUFFER);
            items.push("Vertical flexible bollards placed at regular intervals within the buffer zone.");
        }
        BoundaryKind::ArmadilloBuffer => {
            items.extend_from_slice(&BUFFER);
            items.push(
                "Rounded, semi-flexible rubber lane dividers (\u{201c}armadillos\u{201d}) placed centrally and evenly spaced within the buffer zone. Dividers should be dome-shaped, black with white reflective stripes.",
            );
        }
    }
    items
}

/// Feature checklist for the binary compliance judge.
pub fn compliance_checklist(scenario: &DesignScenario) -> String {
    let mut out = String::new();
    for (n, side) in [(1, Side::Left), (2, Side::Right)] {
        out.push_str(&format!("{n}. {} Boundary:\n", side.label()));
        for item in checklist_items(scenario.boundary(side).kind, side) {
            out.push_str("  -- ");
            out.push_str(item);
            out.push('\n');
        }
    }
    out.truncate(out.trim_end().len());
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneDescription {
    pub present: bool,
    pub raw_text: String,
    pub markings: String,
    pub pattern: String,
    pub width_estimate: String,
    pub relative_position: String,
    #[serde(default)]
    pub parse_warning: bool,
}

impl LaneDescription {
    pub fn absent(raw_text: impl Into<String>) -> Self {
        Self {
            present: false,
            raw_text: raw_text.into(),
            ..Self::default()
        }
    }

    pub fn structured_is_empty(&self) -> bool {
        self.markings.is_empty()
            && self.pattern.is_empty()
            && self.width_estimate.is_empty()
            && self.relative_position.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizedPrompt {
    pub text: String,
    pub word_count: usize,
    pub scenario_id: u8,
    pub user_prompt: String,
    pub exemplar_set_id: String,
    pub length_warning: bool,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl OptimizedPrompt {
    pub fn new(
        text: impl Into<String>,
        scenario_id: u8,
        user_prompt: impl Into<String>,
        exemplar_set_id: impl Into<String>,
    ) -> Self {
        let text = text.into();
        let word_count = word_count(&text);
        Self {
            text,
            word_count,
            scenario_id,
            user_prompt: user_prompt.into(),
            exemplar_set_id: exemplar_set_id.into(),
            length_warning: word_count > MAX_PROMPT_WORDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStage {
    Highlight,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMeta {
    pub candidate_id: String,
    pub run_id: String,
    pub stage: CandidateStage,
    /// Highlight candidate this one was generated from.
    pub parent: Option<String>,
    /// Content hash of the prompt used to generate this candidate.
    pub prompt_hash: String,
    pub similarity: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CandidateError {
    #[error("a judged candidate must carry a similarity")]
    VerdictWithoutSimilarity,
    #[error("highlight candidates are never scored or judged")]
    ScoredHighlight,
    #[error("final candidates need a highlight ancestor")]
    MissingParent,
    #[error("similarity outside [-1, 1]")]
    SimilarityRange,
}

impl CandidateMeta {
    pub fn check(&self) -> Result<(), CandidateError> {
        if let Some(s) = self.similarity {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&s) {
                return Err(CandidateError::SimilarityRange);
            }
        }
        match self.stage {
            CandidateStage::Highlight => {
                if self.similarity.is_some() || self.verdict != Verdict::Pending {
                    return Err(CandidateError::ScoredHighlight);
                }
            }
            CandidateStage::Final => {
                if self.parent.is_none() {
                    return Err(CandidateError::MissingParent);
                }
                if self.verdict != Verdict::Pending && self.similarity.is_none() {
                    return Err(CandidateError::VerdictWithoutSimilarity);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDesign {
    pub meta: CandidateMeta,
    pub image: Raster,
    pub mask: Option<Mask>,
}

impl CandidateDesign {
    pub fn id(&self) -> &str {
        &self.meta.candidate_id
    }
}

impl core::fmt::Display for CandidateStage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            CandidateStage::Highlight => "highlight",
            CandidateStage::Final => "final",
        })
    }
}

impl core::fmt::Display for Verdict {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Verdict::Pending => "pending",
            Verdict::Yes => "yes",
            Verdict::No => "no",
        })
    }
}

impl SceneMeta {
    pub fn with_normalized_heading(mut self) -> Self {
        self.heading = normalize_heading(self.heading);
        self
    }
}

impl BoundarySpec {
    pub fn label(&self) -> String {
        self.kind.description().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rgb;
    use alloc::vec;

    fn scene(w: u32, h: u32, heading: f64, source: SceneSource) -> StreetScene {
        StreetScene {
            meta: SceneMeta {
                scene_id: "s".into(),
                latitude: 40.0,
                longitude: -75.0,
                heading,
                pitch: 0.0,
                fov: 90.0,
                width: w,
                height: h,
                source,
            },
            image: Raster::filled(w, h, Rgb([0, 0, 0])),
        }
    }

    #[test]
    fn catalog_rows() {
        let cat = scenario_catalog();
        assert_eq!(cat.len(), 8);
        assert_eq!(
            cat.iter().map(|s| s.scenario_id).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5, 6, 7, 8]
        );
        assert_eq!(cat[2 - 1].right.kind, BoundaryKind::PaintedBuffer);
        assert_eq!(cat[2 - 1].right.buffer_width_ft, 3.0);
        assert_eq!(cat[7 - 1].left.kind, BoundaryKind::BollardBuffer);
        assert_eq!(cat[7 - 1].left.buffer_width_ft, 1.5);
        assert_eq!(cat[7 - 1].right.kind, BoundaryKind::DirectEdge);
        for s in &cat {
            s.left.validate().unwrap();
            s.right.validate().unwrap();
            assert!(!(s.left.kind.is_buffer() && s.right.kind.is_buffer()));
        }
        for id in [1, 5] {
            let s = &cat[id - 1];
            assert!(!s.left.kind.is_buffer() && !s.right.kind.is_buffer());
        }
        assert!(scenario(0).is_none());
        assert!(scenario(9).is_none());
    }

    #[test]
    fn clause_wording() {
        assert_eq!(
            render_boundary_clause(&BoundarySpec::new(BoundaryKind::PaintedBuffer), Side::Right),
            "Right boundary: 3 ft white-painted buffer"
        );
        assert_eq!(
            render_boundary_clause(&BoundarySpec::new(BoundaryKind::DirectEdge), Side::Right),
            "Right boundary: no buffer; direct edge (no separator)"
        );
        let spec = BoundarySpec::new(BoundaryKind::BollardBuffer);
        assert_eq!(
            render_boundary_clause(&spec, Side::Left),
            render_boundary_clause(&spec, Side::Left)
        );
    }

    #[test]
    fn boundary_width_rules() {
        let bad = BoundarySpec {
            kind: BoundaryKind::PaintedBuffer,
            buffer_width_ft: 1.5,
        };
        assert!(bad.validate().is_err());
        let widths: Vec<f64> = BoundaryKind::ALL.iter().map(|k| k.buffer_width_ft()).collect();
        assert!(widths.iter().all(|w| [0.0, 1.5, 3.0].contains(w)));
    }

    #[test]
    fn scene_validation() {
        assert_eq!(
            validate_scene(&scene(1024, 1024, 90.0, SceneSource::StreetViewApi)),
            Ok(())
        );
        assert_eq!(
            validate_scene(&scene(640, 640, 90.0, SceneSource::StreetViewApi)),
            Err(SceneRule::Resolution)
        );
        assert_eq!(validate_scene(&scene(640, 640, 90.0, SceneSource::LocalFile)), Ok(()));
        assert_eq!(
            validate_scene(&scene(1024, 1024, 450.0, SceneSource::StreetViewApi)),
            Err(SceneRule::HeadingRange)
        );
        let mut s = scene(1024, 1024, 450.0, SceneSource::StreetViewApi);
        s.meta = s.meta.with_normalized_heading();
        assert_eq!(s.meta.heading, 90.0);
        assert_eq!(validate_scene(&s), Ok(()));
    }

    #[test]
    fn heading_normalization() {
        assert_eq!(normalize_heading(-90.0), 270.0);
        assert_eq!(normalize_heading(360.0), 0.0);
        assert_eq!(normalize_heading(725.0), 5.0);
    }

    #[test]
    fn batch_homogeneity() {
        let a = scene(1024, 1024, 0.0, SceneSource::StreetViewApi).meta;
        let mut b = a.clone();
        b.heading = 90.0;
        assert_eq!(validate_batch(&[a.clone(), b.clone()]), Ok(()));
        b.fov = 60.0;
        assert_eq!(validate_batch(&[a, b]), Err(SceneRule::BatchMismatch));
    }

    #[test]
    fn prompt_length_warning() {
        let words = |n: usize| vec!["w"; n].join(" ");
        assert!(!OptimizedPrompt::new(words(120), 1, "u", "x").length_warning);
        assert!(!OptimizedPrompt::new(words(130), 1, "u", "x").length_warning);
        let p = OptimizedPrompt::new(words(131), 1, "u", "x");
        assert_eq!(p.word_count, 131);
        assert!(p.length_warning);
    }

    #[test]
    fn armadillo_checklist_mentions_domes() {
        let text = compliance_checklist(&scenario(8).unwrap());
        assert!(text.starts_with("1. Left Boundary:"));
        assert!(text.contains("dome-shaped, black with white reflective stripes"));
        assert!(text.contains("right-hand edge of the bike lane"));
    }

    #[test]
    fn candidate_invariants() {
        let mut m = CandidateMeta {
            candidate_id: "c".into(),
            run_id: "r".into(),
            stage: CandidateStage::Highlight,
            parent: None,
            prompt_hash: "h".into(),
            similarity: None,
            verdict: Verdict::Pending,
        };
        assert_eq!(m.check(), Ok(()));
        m.similarity = Some(0.5);
        assert_eq!(m.check(), Err(CandidateError::ScoredHighlight));
        m.stage = CandidateStage::Final;
        assert_eq!(m.check(), Err(CandidateError::MissingParent));
        m.parent = Some("h".into());
        m.similarity = None;
        m.verdict = Verdict::Yes;
        assert_eq!(m.check(), Err(CandidateError::VerdictWithoutSimilarity));
    }

    #[test]
    fn catalog_serde_roundtrip() {
        let cat = scenario_catalog();
        let json = serde_json::to_string(&cat).unwrap();
        let back: Vec<DesignScenario> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cat);
    }
}
