//! Street-view acquisition at fixed pitch and field of view, and the
//! append-only quality-control queue where an expert picks one view per
//! location.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bikelane_core::domain::{
    normalize_heading, validate_batch, validate_scene, SceneMeta, SceneSource, StreetScene, STREET_VIEW_SIZE,
};
use bikelane_core::Raster;
use serde::{Deserialize, Serialize};

use crate::imaging::{decode_image, encode_png, sha256_hex};
use crate::orchestrator::store::write_atomic;
use crate::providers::http::{check_status, classify};
use crate::providers::{ProviderError, RetryPolicy, Sleeper};
use crate::synth;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("invalid acquisition request: {0}")]
    Invalid(String),
    #[error("no street-level imagery at {location_id}")]
    NoImagery { location_id: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("scenes must be non-empty")]
    Empty,
    #[error("scenes come from more than one location")]
    MixedLocation,
    #[error("unknown QC item {0}")]
    UnknownItem(String),
    #[error("scene {scene_id} is not a candidate of {item_id}")]
    UnknownScene { item_id: String, scene_id: String },
    #[error("QC item {0} is already decided")]
    AlreadyDecided(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("QC store line {line}: {detail}")]
    CorruptStore { line: usize, detail: String },
}

impl IngestError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Invalid(_) | IngestError::Empty | IngestError::MixedLocation | IngestError::Manifest(_) => {
                "validation"
            }
            IngestError::NoImagery { .. } => "no_imagery",
            IngestError::Provider(_) => "provider_failure",
            IngestError::UnknownItem(_) => "not_found",
            IngestError::UnknownScene { .. } => "unknown_scene",
            IngestError::AlreadyDecided(_) => "already_decided",
            IngestError::Io { .. } | IngestError::CorruptStore { .. } => "integrity",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One row of the locations manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub location_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub context_tag: String,
}

/// Reads a `location_id,lat,lon,context_tag` CSV with a header row.
pub fn read_manifest(path: &Path) -> Result<Vec<Location>, IngestError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| IngestError::Manifest(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let loc: Location = row.map_err(|e| IngestError::Manifest(e.to_string()))?;
        if loc.location_id.trim().is_empty() {
            return Err(IngestError::Manifest("empty location_id".into()));
        }
        out.push(loc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRequest {
    pub location_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub headings: Vec<f64>,
    pub pitch: f64,
    pub fov: f64,
    pub size: u32,
}

impl AcquisitionRequest {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::Invalid(m.into()));
        if self.headings.is_empty() {
            return bad("headings are empty");
        }
        if self.headings.iter().any(|h| !(0.0..360.0).contains(h)) {
            return bad("every heading must be in [0, 360)");
        }
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude) {
            return bad("coordinates out of range");
        }
        if !self.pitch.is_finite() || !(-90.0..=90.0).contains(&self.pitch) {
            return bad("pitch must be in [-90, 90]");
        }
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return bad("fov must be in (0, 120]");
        }
        if self.size == 0 {
            return bad("size must be positive");
        }
        Ok(())
    }

    pub fn scene_id(&self, heading: f64) -> String {
        format!("{}@{}", self.location_id, heading)
    }
}

/// Where street-level imagery comes from.
pub trait StreetViewSource: Send + Sync {
    /// False when the location has no imagery.
    fn has_coverage(&self, latitude: f64, longitude: f64) -> Result<bool, ProviderError>;
    fn image(&self, req: &AcquisitionRequest, heading: f64) -> Result<Raster, ProviderError>;
    fn source(&self) -> SceneSource;
}

/// Offline source that synthesizes a street scene per (location, heading).
/// Its scenes are tagged as local files, so any size is accepted.
#[derive(Debug, Clone, Default)]
pub struct MockStreetView {
    /// Coordinates reported as having no imagery.
    pub uncovered: Vec<(f64, f64)>,
}

impl StreetViewSource for MockStreetView {
    fn has_coverage(&self, latitude: f64, longitude: f64) -> Result<bool, ProviderError> {
        Ok(!self.uncovered.contains(&(latitude, longitude)))
    }

    fn image(&self, req: &AcquisitionRequest, heading: f64) -> Result<Raster, ProviderError> {
        let key = sha256_hex(format!("{}|{}|{}", req.latitude, req.longitude, heading).as_bytes());
        let variant = u64::from_str_radix(&key[..16], 16).unwrap_or(0);
        Ok(synth::street_scene(req.size, req.size, variant))
    }

    fn source(&self) -> SceneSource {
        SceneSource::LocalFile
    }
}

/// Static street-view HTTP API: `<endpoint>/metadata` for coverage and
/// `<endpoint>?size=..&location=..&heading=..` for pixels.
pub struct GoogleStreetView {
    client: reqwest::blocking::Client,
    endpoint: url::Url,
    key: String,
}

#[derive(Deserialize)]
struct Metadata {
    status: String,
}

impl GoogleStreetView {
    pub fn new(endpoint: url::Url, key: String, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { client, endpoint, key })
    }

    fn get(&self, url: url::Url) -> Result<reqwest::blocking::Response, ProviderError> {
        check_status(self.client.get(url).send().map_err(classify)?)
    }
}

impl StreetViewSource for GoogleStreetView {
    fn has_coverage(&self, latitude: f64, longitude: f64) -> Result<bool, ProviderError> {
        let mut url = self.endpoint.clone();
        url.path_segments_mut()
            .map_err(|_| ProviderError::Transport("endpoint cannot be a base URL".into()))?
            .pop_if_empty()
            .push("metadata");
        url.query_pairs_mut()
            .append_pair("location", &format!("{latitude},{longitude}"))
            .append_pair("key", &self.key);
        let meta: Metadata = self
            .get(url)?
            .json()
            .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
        match meta.status.as_str() {
            "OK" => Ok(true),
            "ZERO_RESULTS" | "NOT_FOUND" => Ok(false),
            "OVER_QUERY_LIMIT" => Err(ProviderError::RateLimited { attempts: 1 }),
            "REQUEST_DENIED" => Err(ProviderError::AuthFailure(meta.status)),
            other => Err(ProviderError::Upstream {
                status: 200,
                body: other.to_string(),
            }),
        }
    }

    fn image(&self, req: &AcquisitionRequest, heading: f64) -> Result<Raster, ProviderError> {
        let mut url = self.endpoint.clone();
        url.query_pairs_mut()
            .append_pair("size", &format!("{0}x{0}", req.size))
            .append_pair("location", &format!("{},{}", req.latitude, req.longitude))
            .append_pair("heading", &heading.to_string())
            .append_pair("pitch", &req.pitch.to_string())
            .append_pair("fov", &req.fov.to_string())
            .append_pair("key", &self.key);
        let bytes = self.get(url)?.bytes().map_err(|e| {
            if e.is_timeout() {
                classify(e)
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        decode_image(&bytes).map_err(|e| ProviderError::MalformedResponse(e.to_string()))
    }

    fn source(&self) -> SceneSource {
        SceneSource::StreetViewApi
    }
}

fn with_retry<T>(
    retry: RetryPolicy,
    sleeper: &dyn Sleeper,
    mut f: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let mut attempts = 0;
    retry
        .run(sleeper, || {
            attempts += 1;
            f()
        })
        .map_err(|e| e.with_attempts(attempts))
}

/// One scene per heading, all at the request's pitch, fov and size.
pub fn fetch_views(
    source: &dyn StreetViewSource,
    req: &AcquisitionRequest,
    retry: RetryPolicy,
    sleeper: &dyn Sleeper,
) -> Result<Vec<StreetScene>, IngestError> {
    req.validate()?;
    if source.source() == SceneSource::StreetViewApi && req.size != STREET_VIEW_SIZE {
        return Err(IngestError::Invalid(format!(
            "street-view captures are {STREET_VIEW_SIZE}x{STREET_VIEW_SIZE}, got size {}",
            req.size
        )));
    }
    if !with_retry(retry, sleeper, || source.has_coverage(req.latitude, req.longitude))? {
        return Err(IngestError::NoImagery {
            location_id: req.location_id.clone(),
        });
    }
    let mut scenes = Vec::with_capacity(req.headings.len());
    for &heading in &req.headings {
        let image = with_retry(retry, sleeper, || source.image(req, heading))?;
        let scene = StreetScene {
            meta: SceneMeta {
                scene_id: req.scene_id(heading),
                latitude: req.latitude,
                longitude: req.longitude,
                heading: normalize_heading(heading),
                pitch: req.pitch,
                fov: req.fov,
                width: image.width(),
                height: image.height(),
                source: source.source(),
            },
            image,
        };
        validate_scene(&scene)
            .map_err(|e| ProviderError::MalformedResponse(format!("{}: {e}", scene.meta.scene_id)))?;
        scenes.push(scene);
    }
    let metas: Vec<SceneMeta> = scenes.iter().map(|s| s.meta.clone()).collect();
    validate_batch(&metas).map_err(|e| IngestError::Invalid(e.to_string()))?;
    Ok(scenes)
}

/// Writes `<dir>/<scene_id>.png` and `<dir>/<scene_id>.json`.
pub fn save_scene(dir: &Path, scene: &StreetScene) -> Result<(), IngestError> {
    let base = dir.join(&scene.meta.scene_id);
    let png = base.with_extension("png");
    write_atomic(&png, &encode_png(&scene.image)).map_err(|e| IngestError::Manifest(e.to_string()))?;
    let mut json = serde_json::to_vec_pretty(&scene.meta).expect("scene meta serializes");
    json.push(b'\n');
    write_atomic(&base.with_extension("json"), &json).map_err(|e| IngestError::Manifest(e.to_string()))
}

/// Reads a scene written by [`save_scene`], or any image file with a
/// sidecar `<stem>.json`. Without a sidecar the scene is a local file at
/// (0, 0) named after the file stem.
pub fn load_scene(path: &Path) -> Result<StreetScene, IngestError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let image = decode_image(&bytes).map_err(|e| IngestError::Invalid(format!("{}: {e}", path.display())))?;
    let sidecar = path.with_extension("json");
    let meta = if sidecar.is_file() {
        let text = std::fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
        serde_json::from_str(&text).map_err(|e| IngestError::Invalid(format!("{}: {e}", sidecar.display())))?
    } else {
        SceneMeta {
            scene_id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".into()),
            latitude: 0.0,
            longitude: 0.0,
            heading: 0.0,
            pitch: 0.0,
            fov: 90.0,
            width: image.width(),
            height: image.height(),
            source: SceneSource::LocalFile,
        }
    };
    Ok(StreetScene { meta, image })
}

/// Candidate views of one location awaiting (or holding) an expert choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcItem {
    pub item_id: String,
    pub location_id: String,
    pub version: u32,
    pub candidates: Vec<SceneMeta>,
    pub chosen: Option<String>,
    pub reviewer: Option<String>,
    pub decided_at: Option<String>,
    pub enqueued_at: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum QcRecord {
    Enqueued {
        item: QcItem,
    },
    Decided {
        item_id: String,
        scene_id: String,
        reviewer: String,
        at: String,
    },
}

/// Append-only JSON-lines log of QC items and decisions.
pub struct QcStore {
    path: PathBuf,
    write: Mutex<()>,
    clock: Arc<dyn Fn() -> String + Send + Sync>,
}

impl QcStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            write: Mutex::new(()),
            clock: crate::orchestrator::system_clock(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Fn() -> String + Send + Sync>) -> Self {
        self.clock = clock;
        self
    }

    fn records(&self) -> Result<Vec<QcRecord>, IngestError> {
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path)(e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&self.path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| IngestError::CorruptStore {
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Ok(out)
    }

    fn append(&self, record: &QcRecord) -> Result<(), IngestError> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut line = serde_json::to_string(record).expect("QC records serialize");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        f.sync_data().map_err(io_err(&self.path))
    }

    /// Every item version in enqueue order, decisions applied.
    pub fn items(&self) -> Result<Vec<QcItem>, IngestError> {
        let mut items: Vec<QcItem> = Vec::new();
        let mut index = BTreeMap::new();
        for record in self.records()? {
            match record {
                QcRecord::Enqueued { item } => {
                    index.insert(item.item_id.clone(), items.len());
                    items.push(item);
                }
                QcRecord::Decided {
                    item_id,
                    scene_id,
                    reviewer,
                    at,
                } => {
                    if let Some(&i) = index.get(&item_id) {
                        let item = &mut items[i];
                        if item.chosen.is_none() {
                            item.chosen = Some(scene_id);
                            item.reviewer = Some(reviewer);
                            item.decided_at = Some(at);
                        }
                    }
                }
            }
        }
        Ok(items)
    }

    pub fn get(&self, item_id: &str) -> Result<QcItem, IngestError> {
        self.items()?
            .into_iter()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| IngestError::UnknownItem(item_id.to_string()))
    }

    /// Queues the views of one location. Re-enqueueing a location creates a
    /// new item version; earlier versions stay as they were.
    pub fn enqueue(&self, location_id: &str, scenes: &[SceneMeta]) -> Result<QcItem, IngestError> {
        let first = scenes.first().ok_or(IngestError::Empty)?;
        if scenes
            .iter()
            .any(|s| s.latitude != first.latitude || s.longitude != first.longitude)
        {
            return Err(IngestError::MixedLocation);
        }
        let _guard = self.write.lock().unwrap_or_else(|p| p.into_inner());
        let version = self
            .items()?
            .iter()
            .filter(|i| i.location_id == location_id)
            .map(|i| i.version)
            .max()
            .unwrap_or(0)
            + 1;
        let item = QcItem {
            item_id: format!("{location_id}-v{version}"),
            location_id: location_id.to_string(),
            version,
            candidates: scenes.to_vec(),
            chosen: None,
            reviewer: None,
            decided_at: None,
            enqueued_at: (self.clock)(),
        };
        self.append(&QcRecord::Enqueued { item: item.clone() })?;
        Ok(item)
    }

    pub fn record_choice(&self, item_id: &str, scene_id: &str, reviewer: &str) -> Result<QcItem, IngestError> {
        let _guard = self.write.lock().unwrap_or_else(|p| p.into_inner());
        let mut item = self.get(item_id)?;
        if item.chosen.is_some() {
            return Err(IngestError::AlreadyDecided(item_id.to_string()));
        }
        if !item.candidates.iter().any(|c| c.scene_id == scene_id) {
            return Err(IngestError::UnknownScene {
                item_id: item_id.to_string(),
                scene_id: scene_id.to_string(),
            });
        }
        let at = (self.clock)();
        self.append(&QcRecord::Decided {
            item_id: item_id.to_string(),
            scene_id: scene_id.to_string(),
            reviewer: reviewer.to_string(),
            at: at.clone(),
        })?;
        item.chosen = Some(scene_id.to_string());
        item.reviewer = Some(reviewer.to_string());
        item.decided_at = Some(at);
        Ok(item)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSettings {
    pub headings: Vec<f64>,
    pub pitch: f64,
    pub fov: f64,
    pub size: u32,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self {
            headings: vec![0.0, 90.0, 180.0, 270.0],
            pitch: 0.0,
            fov: 90.0,
            size: STREET_VIEW_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub enqueued: Vec<String>,
    pub no_imagery: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Fetches every location (up to four at once), saves the views and queues
/// each location for QC. Locations without imagery enqueue nothing.
pub fn ingest_locations(
    source: &dyn StreetViewSource,
    locations: &[Location],
    settings: &IngestSettings,
    retry: RetryPolicy,
    sleeper: &dyn Sleeper,
    scenes_dir: &Path,
    store: &QcStore,
) -> IngestSummary {
    let mut summary = IngestSummary::default();
    for chunk in locations.chunks(4) {
        let fetched: Vec<(&Location, Result<Vec<StreetScene>, IngestError>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|loc| {
                    s.spawn(move || {
                        let req = AcquisitionRequest {
                            location_id: loc.location_id.clone(),
                            latitude: loc.lat,
                            longitude: loc.lon,
                            headings: settings.headings.clone(),
                            pitch: settings.pitch,
                            fov: settings.fov,
                            size: settings.size,
                        };
                        (loc, fetch_views(source, &req, retry, sleeper))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch thread panicked"))
                .collect()
        });
        for (loc, res) in fetched {
            let outcome = res.and_then(|scenes| {
                for scene in &scenes {
                    save_scene(scenes_dir, scene)?;
                }
                let metas: Vec<SceneMeta> = scenes.into_iter().map(|s| s.meta).collect();
                store.enqueue(&loc.location_id, &metas)
            });
            match outcome {
                Ok(item) => summary.enqueued.push(item.item_id),
                Err(IngestError::NoImagery { location_id }) => summary.no_imagery.push(location_id),
                Err(e) => summary.failed.push((loc.location_id.clone(), e.to_string())),
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::VirtualClock;

    fn req(headings: Vec<f64>, size: u32) -> AcquisitionRequest {
        AcquisitionRequest {
            location_id: "loc1".into(),
            latitude: 40.0,
            longitude: -75.0,
            headings,
            pitch: 0.0,
            fov: 90.0,
            size,
        }
    }

    #[test]
    fn one_scene_per_heading() {
        let clock = VirtualClock::default();
        let small = fetch_views(
            &MockStreetView::default(),
            &req(vec![0.0], 64),
            RetryPolicy::default(),
            &clock,
        )
        .unwrap();
        assert_eq!(small[0].image.dimensions(), (64, 64));
        let scenes = fetch_views(
            &MockStreetView::default(),
            &req(vec![0.0, 90.0, 180.0, 270.0], 1024),
            RetryPolicy::default(),
            &clock,
        )
        .unwrap();
        let headings: Vec<f64> = scenes.iter().map(|s| s.meta.heading).collect();
        assert_eq!(headings, vec![0.0, 90.0, 180.0, 270.0]);
        assert!(scenes.iter().all(|s| s.image.dimensions() == (1024, 1024)));
        assert_ne!(scenes[0].image, scenes[1].image);
    }

    #[test]
    fn request_invariants() {
        assert!(req(vec![], 1024).validate().is_err());
        assert!(req(vec![360.0], 1024).validate().is_err());
        assert!(req(vec![-1.0], 1024).validate().is_err());
        assert!(req(vec![359.9], 1024).validate().is_ok());
    }

    #[test]
    fn no_coverage_is_reported() {
        let source = MockStreetView {
            uncovered: vec![(40.0, -75.0)],
        };
        let err = fetch_views(
            &source,
            &req(vec![0.0], 1024),
            RetryPolicy::default(),
            &VirtualClock::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::NoImagery { .. }));
    }
}
