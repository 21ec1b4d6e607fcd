//! Content-addressed record/replay of provider traffic.
//!
//! Layout: `<root>/<capability>/<fingerprint>.json`, where the fingerprint is
//! the sha256 of the request with images replaced by their content hashes.
//! Each file holds `{"capability", "request", "response"}`.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::{Backend, Capability, ImageEncoding, ProviderError, Request, Response};

pub fn fixture_path(root: &Path, request: &Request) -> PathBuf {
    root.join(request.capability().as_str())
        .join(format!("{}.json", request.fingerprint()))
}

/// Serves recorded responses only; never touches the network.
pub struct Replay {
    root: PathBuf,
}

impl Replay {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

fn read_fixture(path: &Path, cap: Capability) -> Result<Response, ProviderError> {
    let bytes = std::fs::read(path).map_err(|_| ProviderError::FixtureMiss(path.display().to_string()))?;
    let v: Value = serde_json::from_slice(&bytes)
        .map_err(|e| ProviderError::MalformedResponse(format!("{}: {e}", path.display())))?;
    let response = v
        .get("response")
        .ok_or_else(|| ProviderError::MalformedResponse(format!("{}: no response", path.display())))?;
    Response::from_json(cap, response)
}

impl Backend for Replay {
    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        read_fixture(&fixture_path(&self.root, request), request.capability())
    }
}

/// Forwards to `inner` and writes every successful exchange to disk.
pub struct Record<B> {
    root: PathBuf,
    inner: B,
}

impl<B: Backend> Record<B> {
    pub fn new(root: impl Into<PathBuf>, inner: B) -> Self {
        Self {
            root: root.into(),
            inner,
        }
    }
}

impl<B: Backend> Backend for Record<B> {
    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        let response = self.inner.call(request)?;
        let path = fixture_path(&self.root, request);
        let doc = json!({
            "capability": request.capability().as_str(),
            "request": request.to_json(ImageEncoding::Hash),
            "response": response.to_json(),
        });
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(path.parent().expect("fixture path has a parent"))?;
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(&doc)?)?;
            std::fs::rename(&tmp, &path)
        };
        write().map_err(|e| ProviderError::Transport(format!("writing fixture: {e}")))?;
        Ok(response)
    }
}
