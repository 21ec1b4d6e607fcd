//! Candidate scoring: masking, cosine similarity, re-ranking against a
//! reference design, top-k advancement, verdict parsing and final selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::domain::Verdict;
use crate::raster::{Mask, Raster, RasterError, Rgb};

pub const DEFAULT_TOP_K: NonZeroUsize = match NonZeroUsize::new(3) {
    Some(k) => k,
    None => unreachable!(),
};

pub const DEFAULT_MAX_ROUNDS: u32 = 3;

/// Keeps pixels where the mask is set and paints everything else `fill`.
pub fn apply_mask(image: &Raster, mask: &Mask, fill: Rgb) -> Result<Raster, RasterError> {
    if image.dimensions() != mask.dimensions() {
        return Err(RasterError::DimensionMismatch {
            left: image.dimensions(),
            right: mask.dimensions(),
        });
    }
    let mut out = Vec::with_capacity(image.as_bytes().len());
    for (px, &bit) in image.as_bytes().chunks_exact(3).zip(mask.bits()) {
        if bit == 1 {
            out.extend_from_slice(px);
        } else {
            out.extend_from_slice(&fill.0);
        }
    }
    Raster::from_rgb8(image.width(), image.height(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding has non-finite components")]
    NonFinite,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    Degenerate,
}

/// Finite, fixed-dimension embedding. Not necessarily unit norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(EmbeddingError::NonFinite)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::Degenerate);
    }
    let cos = dot / (libm::sqrt(na) * libm::sqrt(nb));
    if !cos.is_finite() {
        return Err(EmbeddingError::NonFinite);
    }
    Ok(cos.clamp(-1.0, 1.0))
}

/// Normalized histogram of every channel byte, `bins` equal-width buckets.
pub fn byte_histogram(image: &Raster, bins: usize) -> Embedding {
    assert!((1..=256).contains(&bins), "bins must be in 1..=256");
    let mut counts = alloc::vec![0u64; bins];
    for &b in image.as_bytes() {
        counts[b as usize * bins / 256] += 1;
    }
    let total = image.as_bytes().len().max(1) as f64;
    Embedding(counts.into_iter().map(|c| c as f64 / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub candidate_id: String,
    /// Absent when scoring failed; such entries sort last.
    pub similarity: Option<f64>,
    #[serde(default)]
    pub empty_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPool {
    pub entries: Vec<RankedEntry>,
    pub reference_image_id: String,
    pub masked: bool,
}

/// Scored before unscored, similarity descending, then candidate id ascending.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    match (a.similarity, b.similarity) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

impl RankedPool {
    pub fn new(reference_image_id: impl Into<String>, masked: bool, mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(rank_order);
        Self {
            entries,
            reference_image_id: reference_image_id.into(),
            masked,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn similarity_of(&self, candidate_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.candidate_id == candidate_id)
            .and_then(|e| e.similarity)
    }
}

/// The first `min(k, scored)` candidate ids; unscored entries never advance.
pub fn top_k(pool: &RankedPool, k: NonZeroUsize) -> Vec<String> {
    pool.entries
        .iter()
        .filter(|e| e.similarity.is_some())
        .take(k.get())
        .map(|e| e.candidate_id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub verdict: Verdict,
    /// Set when the raw text was not exactly `yes` or `no`.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable verdict {0:?}")]
pub struct UnparseableVerdict(pub String);

/// Trim and lowercase; lenient mode also drops one trailing punctuation mark.
pub fn parse_verdict(raw: &str, mode: VerdictMode) -> Result<ParsedVerdict, UnparseableVerdict> {
    let mut token = raw.trim().to_lowercase();
    if mode == VerdictMode::Lenient {
        if let Some(last) = token.chars().last() {
            if last.is_ascii_punctuation() {
                token.pop();
            }
        }
    }
    let verdict = match token.as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => return Err(UnparseableVerdict(raw.to_string())),
    };
    Ok(ParsedVerdict {
        verdict,
        flagged: raw != token,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Selected,
    Regenerate,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub selected: Option<String>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectError {
    #[error("verdicts must cover exactly the advanced candidates {advanced:?}")]
    Coverage { advanced: Vec<String> },
    #[error("verdict for {0} is still pending")]
    Pending(String),
}

/// Picks the most similar advanced candidate judged `yes`.
///
/// With no `yes`, asks for another generation round while `round < max_rounds`
/// and reports exhaustion otherwise.
pub fn select_final(
    pool: &RankedPool,
    verdicts: &BTreeMap<String, Verdict>,
    k: NonZeroUsize,
    round: u32,
    max_rounds: u32,
) -> Result<SelectionOutcome, SelectError> {
    let advanced = top_k(pool, k);
    let covered: BTreeSet<&str> = verdicts.keys().map(String::as_str).collect();
    let expected: BTreeSet<&str> = advanced.iter().map(String::as_str).collect();
    if covered != expected {
        return Err(SelectError::Coverage { advanced });
    }
    if let Some((id, _)) = verdicts.iter().find(|(_, v)| **v == Verdict::Pending) {
        return Err(SelectError::Pending(id.clone()));
    }
    let selected = advanced
        .iter()
        .find(|id| verdicts.get(id.as_str()) == Some(&Verdict::Yes))
        .cloned();
    let disposition = match (&selected, round < max_rounds) {
        (Some(_), _) => Disposition::Selected,
        (None, true) => Disposition::Regenerate,
        (None, false) => Disposition::Exhausted,
    };
    Ok(SelectionOutcome {
        selected,
        verdicts: verdicts.clone(),
        disposition,
    })
}
