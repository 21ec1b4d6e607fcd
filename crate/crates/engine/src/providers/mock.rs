//! Deterministic stand-ins for the model providers.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use bikelane_core::evaluate::byte_histogram;
use bikelane_core::lane::HIGHLIGHT_STATEMENT;
use bikelane_core::{Mask, Raster, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backend, Capability, DescribeRequest, EditRequest, JudgeRequest, ProviderError, Request, Response};
use crate::imaging::{decode_mask_png, raster_hash, sha256_hex};
use crate::synth::{self, DesignStyle, Edge};

/// Dimension of the mock embedding.
pub const EMBED_BINS: usize = 8;

fn wrong_capability(expected: Capability, r: &Request) -> ProviderError {
    ProviderError::Precondition(format!(
        "{} mock cannot serve {}",
        expected.as_str(),
        r.capability().as_str()
    ))
}

/// Normalized 8-bin byte histogram.
pub struct MockEmbedder;

impl Backend for MockEmbedder {
    fn call(&self, r: &Request) -> Result<Response, ProviderError> {
        match r {
            Request::Embed(img) => Ok(Response::Embedding(byte_histogram(img, EMBED_BINS).values().to_vec())),
            _ => Err(wrong_capability(Capability::Embed, r)),
        }
    }
}

/// Masks looked up by image hash: first the in-memory table, then
/// `<sidecar>/<hash>.png`, then (optionally) the synthetic lane corridor.
#[derive(Default)]
pub struct MockSegmenter {
    pub table: BTreeMap<String, Mask>,
    pub sidecar: Option<PathBuf>,
    pub corridor_fallback: bool,
}

impl MockSegmenter {
    pub fn corridor() -> Self {
        Self {
            corridor_fallback: true,
            ..Self::default()
        }
    }

    fn lookup(&self, img: &Raster) -> Result<Mask, ProviderError> {
        let hash = raster_hash(img);
        if let Some(m) = self.table.get(&hash) {
            return Ok(m.clone());
        }
        if let Some(dir) = &self.sidecar {
            let path = dir.join(format!("{hash}.png"));
            if let Ok(bytes) = std::fs::read(&path) {
                return decode_mask_png(&bytes)
                    .map_err(|e| ProviderError::MalformedResponse(format!("{}: {e}", path.display())));
            }
        }
        if self.corridor_fallback {
            let (w, h) = img.dimensions();
            return Ok(synth::lane_corridor(w, h));
        }
        Err(ProviderError::MockMiss(format!("segment {hash}")))
    }
}

impl Backend for MockSegmenter {
    fn call(&self, r: &Request) -> Result<Response, ProviderError> {
        match r {
            Request::Segment(img) => self.lookup(img).map(Response::Mask),
            _ => Err(wrong_capability(Capability::Segment, r)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JudgePolicy {
    /// Every lookup miss answers with this text.
    Always(String),
    /// Pseudo-random yes/no from the request hash, `yes_per_mille` out of 1000.
    Hashed { yes_per_mille: u16 },
    /// Misses are errors.
    Strict,
}

/// Answers keyed by `(image hash, prompt hash)`, falling back to a policy.
pub struct MockJudge {
    pub table: BTreeMap<(String, String), String>,
    pub policy: JudgePolicy,
}

impl MockJudge {
    pub fn always(text: &str) -> Self {
        Self {
            table: BTreeMap::new(),
            policy: JudgePolicy::Always(text.into()),
        }
    }

    pub fn key(image: &Raster, prompt: &str) -> (String, String) {
        (raster_hash(image), sha256_hex(prompt.as_bytes()))
    }

    fn answer(&self, j: &JudgeRequest) -> Result<String, ProviderError> {
        let key = Self::key(&j.image, &j.prompt);
        if let Some(t) = self.table.get(&key) {
            return Ok(t.clone());
        }
        match &self.policy {
            JudgePolicy::Always(t) => Ok(t.clone()),
            JudgePolicy::Hashed { yes_per_mille } => {
                let d = Sha256::digest(format!("{}|{}", key.0, key.1));
                let v = u16::from_le_bytes([d[0], d[1]]) % 1000;
                Ok(if v < *yes_per_mille { "yes" } else { "no" }.into())
            }
            JudgePolicy::Strict => Err(ProviderError::MockMiss(format!("judge {}/{}", key.0, key.1))),
        }
    }
}

impl Backend for MockJudge {
    fn call(&self, r: &Request) -> Result<Response, ProviderError> {
        match r {
            Request::Judge(j) => self.answer(j).map(Response::Text),
            _ => Err(wrong_capability(Capability::Judge, r)),
        }
    }
}

pub const CANNED_LOCATION: &str = "The primary bike lane runs along the right side of the roadway. \
Its left boundary is a continuous solid white line separating it from the motor-vehicle lanes. \
Its right boundary is a continuous solid white line next to the curb and sidewalk. \
The lane is approximately 5 feet wide and follows the roadway curvature toward the intersection.";

/// Text answers keyed by image hash (or `text:<sha256 of user prompt>` for
/// requests without an image). With `fallback`, misses are answered by rules:
/// a fixed lane description for images, and a boundary-aware rewrite for
/// prompt optimization.
#[derive(Default)]
pub struct MockReasoner {
    pub table: BTreeMap<String, String>,
    pub fallback: bool,
}

impl MockReasoner {
    pub fn with_fallback() -> Self {
        Self {
            table: BTreeMap::new(),
            fallback: true,
        }
    }

    pub fn key(d: &DescribeRequest) -> String {
        match &d.image {
            Some(img) => raster_hash(img),
            None => format!("text:{}", sha256_hex(d.user_prompt.as_bytes())),
        }
    }

    fn answer(&self, d: &DescribeRequest) -> Result<String, ProviderError> {
        let key = Self::key(d);
        if let Some(t) = self.table.get(&key) {
            return Ok(t.clone());
        }
        if !self.fallback {
            return Err(ProviderError::MockMiss(format!("describe {key}")));
        }
        Ok(match d.image {
            Some(_) => CANNED_LOCATION.to_string(),
            None => rewrite_prompt(&d.user_prompt),
        })
    }
}

impl Backend for MockReasoner {
    fn call(&self, r: &Request) -> Result<Response, ProviderError> {
        match r {
            Request::Describe(d) => self.answer(d).map(Response::Text),
            _ => Err(wrong_capability(Capability::Describe, r)),
        }
    }
}

fn line_after<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.trim().strip_prefix(label)).map(str::trim)
}

fn forbids_green(lower: &str) -> bool {
    lower.contains("no green") || lower.contains("not paint") || lower.contains("standard road surface")
}

/// Deterministic optimizer stand-in built from the request's boundary lines
/// and the quoted user prompt.
pub fn rewrite_prompt(request: &str) -> String {
    let user = request
        .split_once("Rewrite the \"")
        .and_then(|(_, rest)| rest.split_once("\" into"))
        .map_or("", |(u, _)| u.trim());
    let lower = user.to_lowercase();
    let surface = if lower.contains("green") && !forbids_green(&lower) {
        "Paint the bike lane green, strictly contained between two continuous solid white lines."
    } else {
        "Use the standard road surface color only. No green paint."
    };
    let left = line_after(request, "Left boundary:").unwrap_or("a prominent, continuous solid white line");
    let right = line_after(request, "Right boundary:").unwrap_or("a prominent, continuous solid white line");
    format!(
        "The highlighted area represents the existing bike lane. Clearly depict an updated bike lane \
         located along the right-hand side of the road. {surface} Clearly mark both boundaries of the \
         bike lane: 1) Left boundary: {left}. 2) Right boundary: {right}. Ensure the bike lane is \
         clearly defined by solid white lines on both sides."
    )
}

const COLORS: &[(&str, Rgb)] = &[
    ("green", synth::GREEN),
    ("red", Rgb([190, 40, 40])),
    ("blue", Rgb([40, 80, 190])),
    ("yellow", Rgb([220, 200, 40])),
    ("orange", Rgb([230, 130, 30])),
];

fn highlight_color(prompt: &str) -> Rgb {
    let lower = prompt.to_lowercase();
    COLORS
        .iter()
        .filter_map(|(name, c)| lower.find(&format!("{name}-painted")).map(|i| (i, *c)))
        .min_by_key(|(i, _)| *i)
        .map_or(synth::GREEN, |(_, c)| c)
}

fn edge_from(clause: Option<&str>) -> Edge {
    let Some(c) = clause.map(str::to_lowercase) else {
        return Edge::Line;
    };
    if c.contains("armadillo") {
        Edge::Armadillos
    } else if c.contains("bollard") {
        Edge::Bollards
    } else if c.contains("buffer") && !c.contains("no buffer") || c.contains("stripe") {
        Edge::Buffer
    } else {
        Edge::Line
    }
}

/// The design a final-stage prompt asks for.
pub fn style_from_prompt(prompt: &str) -> DesignStyle {
    let lower = prompt.to_lowercase();
    let clause = |side: &str| {
        lower.find(side).map(|i| &lower[i + side.len()..]).map(|rest| {
            let end = [rest.find(". "), rest.find('\n')].into_iter().flatten().min();
            end.map_or(rest, |e| &rest[..e])
        })
    };
    let left = clause("left boundary:");
    let right = clause("right boundary:");
    DesignStyle {
        surface: if lower.contains("green") && !forbids_green(&lower) {
            synth::GREEN
        } else {
            synth::ROAD
        },
        left: edge_from(left),
        right: edge_from(right),
        stripe_period: 12,
        parked_cars: right.is_some_and(|r| r.contains("parked")),
    }
}

fn jitter(style: &DesignStyle, rng: &mut ChaCha8Rng) -> DesignStyle {
    let mut s = *style;
    s.stripe_period = rng.gen_range(8..=18);
    let swap = |e: Edge| if e == Edge::Line { Edge::Buffer } else { Edge::Line };
    if rng.gen_bool(0.3) {
        if rng.gen_bool(0.5) {
            s.left = swap(s.left);
        } else {
            s.right = swap(s.right);
        }
    }
    if rng.gen_bool(0.2) {
        s.surface = if s.surface == synth::GREEN {
            synth::ROAD
        } else {
            synth::GREEN
        };
    }
    let Rgb(c) = s.surface;
    s.surface = Rgb(c.map(|v| v.saturating_add_signed(rng.gen_range(-12..=12))));
    s
}

/// Paints the lane corridor. Prompts carrying the highlight statement get a
/// full design with per-slot variation; other prompts get a flat highlight.
/// Output is a pure function of the input image, prompt, seed and slot.
pub struct MockEditor;

impl MockEditor {
    fn rng(req: &EditRequest, slot: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(raster_hash(&req.image));
        h.update(req.prompt.as_bytes());
        h.update(req.seed.to_le_bytes());
        h.update(slot.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn render(req: &EditRequest, slot: u32) -> Raster {
        let mut img = req.image.clone();
        let (w, h) = img.dimensions();
        if req.prompt.contains(HIGHLIGHT_STATEMENT) {
            let style = jitter(&style_from_prompt(&req.prompt), &mut Self::rng(req, slot));
            synth::paint_design(&mut img, &style);
        } else {
            let color = highlight_color(&req.prompt);
            let corridor = synth::lane_corridor(w, h);
            for y in 0..h {
                for x in 0..w {
                    if corridor.get(x, y) {
                        img.set(x, y, color);
                    }
                }
            }
        }
        img
    }
}

impl Backend for MockEditor {
    fn call(&self, r: &Request) -> Result<Response, ProviderError> {
        match r {
            Request::Edit(e) => Ok(Response::Images((0..e.n).map(|slot| Self::render(e, slot)).collect())),
            _ => Err(wrong_capability(Capability::EditImage, r)),
        }
    }
}

/// One mock per capability, in [`Capability::ALL`] order.
pub struct MockSuite {
    pub editor: Arc<dyn Backend>,
    pub reasoner: Arc<dyn Backend>,
    pub embedder: Arc<dyn Backend>,
    pub segmenter: Arc<dyn Backend>,
    pub judge: Arc<dyn Backend>,
}

impl Default for MockSuite {
    fn default() -> Self {
        Self {
            editor: Arc::new(MockEditor),
            reasoner: Arc::new(MockReasoner::with_fallback()),
            embedder: Arc::new(MockEmbedder),
            segmenter: Arc::new(MockSegmenter::corridor()),
            judge: Arc::new(MockJudge::always("yes")),
        }
    }
}

impl MockSuite {
    pub fn get(&self, cap: Capability) -> Arc<dyn Backend> {
        match cap {
            Capability::EditImage => self.editor.clone(),
            Capability::Describe => self.reasoner.clone(),
            Capability::Embed => self.embedder.clone(),
            Capability::Segment => self.segmenter.clone(),
            Capability::Judge => self.judge.clone(),
        }
    }
}
