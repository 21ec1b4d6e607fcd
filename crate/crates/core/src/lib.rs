//! Pure building blocks of the bike-lane design pipeline.
//!
//! Everything here is `no_std` + `alloc`: the design-scenario catalog,
//! prompt templating, locator response parsing, candidate masking and
//! re-ranking, selection, the run state machine and the evaluation metrics.
//! Provider calls, image codecs and persistence live in the `bikelane`
//! engine crate.

#![no_std]

extern crate alloc;

pub mod domain;
pub mod evaluate;
pub mod lane;
pub mod metrics;
pub mod raster;
pub mod template;
pub mod workflow;

pub use domain::{
    render_boundary_clause, scenario, scenario_catalog, validate_scene, BoundaryKind, BoundarySpec, CandidateDesign,
    CandidateMeta, CandidateStage, DesignScenario, LaneDescription, OptimizedPrompt, SceneMeta, SceneSource, Side,
    StreetScene, Verdict,
};
pub use evaluate::{
    apply_mask, cosine_similarity, select_final, top_k, Disposition, Embedding, RankedEntry, RankedPool,
    SelectionOutcome,
};
pub use raster::{Mask, Raster, Rgb};
pub use workflow::{CheckpointStage, Event, PipelineRun, RunState};
