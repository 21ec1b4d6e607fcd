//! Model capabilities behind a single request/response interface.
//!
//! Every backend (mock, recorded fixture, live HTTP) answers [`Request`]s.
//! [`Providers`] wraps one backend per capability with argument checks,
//! retry with exponential backoff and a per-provider concurrency limit.

pub mod fixture;
pub mod http;
pub mod mock;
pub mod retry;

use std::sync::Arc;

use base64::Engine as _;
use bikelane_core::{Embedding, Mask, Raster};
use serde_json::{json, Value};

use crate::imaging::{self, raster_hash};
pub use retry::{RetryPolicy, Semaphore, Sleeper, ThreadSleeper, VirtualClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Capability {
    EditImage,
    Describe,
    Embed,
    Segment,
    Judge,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::EditImage,
        Capability::Describe,
        Capability::Embed,
        Capability::Segment,
        Capability::Judge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::EditImage => "edit_image",
            Capability::Describe => "describe",
            Capability::Embed => "embed",
            Capability::Segment => "segment",
            Capability::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("mock has no entry for {0}")]
    MockMiss(String),
    #[error("no recorded fixture at {0}")]
    FixtureMiss(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("upstream error {status}: {body}")]
    Upstream { status: u16, body: String },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Timeout { .. } | ProviderError::RateLimited { .. })
    }

    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::Timeout { .. } => "timeout",
            ProviderError::RateLimited { .. } => "rate_limited",
            ProviderError::MalformedResponse(_) => "malformed_response",
            ProviderError::AuthFailure(_) => "auth_failure",
            ProviderError::MockMiss(_) => "mock_miss",
            ProviderError::FixtureMiss(_) => "fixture_miss",
            ProviderError::Precondition(_) => "precondition",
            ProviderError::Transport(_) => "transport",
            ProviderError::Upstream { .. } => "upstream",
        }
    }

    pub(crate) fn with_attempts(self, attempts: u32) -> Self {
        match self {
            ProviderError::Timeout { .. } => ProviderError::Timeout { attempts },
            ProviderError::RateLimited { .. } => ProviderError::RateLimited { attempts },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub image: Raster,
    /// Further visual inputs after the primary image.
    pub extra_images: Vec<Raster>,
    pub system_prompt: Option<String>,
    pub prompt: String,
    pub n: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribeRequest {
    pub image: Option<Raster>,
    pub system_prompt: String,
    pub user_prompt: String,
    /// Overrides the provider's configured model.
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub image: Raster,
    pub reference: Option<Raster>,
    pub system_prompt: String,
    pub prompt: String,
    /// The generation prompt the candidate was produced from.
    pub final_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Edit(EditRequest),
    Describe(DescribeRequest),
    Embed(Raster),
    Segment(Raster),
    Judge(JudgeRequest),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Images(Vec<Raster>),
    Text(String),
    Embedding(Vec<f64>),
    Mask(Mask),
}

/// How images are written when a request is serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageEncoding {
    /// Content hash only; used for fixture keys.
    Hash,
    /// Base64 PNG; used on the wire.
    Inline,
}

fn image_json(r: &Raster, enc: ImageEncoding) -> Value {
    match enc {
        ImageEncoding::Hash => json!({ "sha256": raster_hash(r) }),
        ImageEncoding::Inline => json!({
            "png_base64": base64::engine::general_purpose::STANDARD.encode(imaging::encode_png(r))
        }),
    }
}

impl Request {
    pub fn capability(&self) -> Capability {
        match self {
            Request::Edit(_) => Capability::EditImage,
            Request::Describe(_) => Capability::Describe,
            Request::Embed(_) => Capability::Embed,
            Request::Segment(_) => Capability::Segment,
            Request::Judge(_) => Capability::Judge,
        }
    }

    pub fn to_json(&self, enc: ImageEncoding) -> Value {
        let img = |r: &Raster| image_json(r, enc);
        match self {
            Request::Edit(e) => json!({
                "image": img(&e.image),
                "extra_images": e.extra_images.iter().map(img).collect::<Vec<_>>(),
                "system_prompt": e.system_prompt,
                "prompt": e.prompt,
                "n": e.n,
                "seed": e.seed,
            }),
            Request::Describe(d) => json!({
                "image": d.image.as_ref().map(img),
                "system_prompt": d.system_prompt,
                "user_prompt": d.user_prompt,
                "model": d.model,
            }),
            Request::Embed(r) | Request::Segment(r) => json!({ "image": img(r) }),
            Request::Judge(j) => json!({
                "image": img(&j.image),
                "reference": j.reference.as_ref().map(img),
                "system_prompt": j.system_prompt,
                "prompt": j.prompt,
                "final_prompt": j.final_prompt,
            }),
        }
    }

    /// Hex sha256 of the hash-encoded request JSON.
    pub fn fingerprint(&self) -> String {
        let body = json!({
            "capability": self.capability().as_str(),
            "request": self.to_json(ImageEncoding::Hash),
        });
        imaging::sha256_hex(body.to_string().as_bytes())
    }
}

fn decode_b64_png(v: &Value) -> Result<Vec<u8>, ProviderError> {
    let s = v
        .get("png_base64")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::MalformedResponse("expected {\"png_base64\": ...}".into()))?;
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| ProviderError::MalformedResponse(format!("base64: {e}")))
}

impl Response {
    pub fn to_json(&self) -> Value {
        let b64 = |bytes: Vec<u8>| json!({ "png_base64": base64::engine::general_purpose::STANDARD.encode(bytes) });
        match self {
            Response::Images(images) => json!({
                "images": images.iter().map(|r| b64(imaging::encode_png(r))).collect::<Vec<_>>()
            }),
            Response::Text(t) => json!({ "text": t }),
            Response::Embedding(v) => json!({ "embedding": v }),
            Response::Mask(m) => json!({ "mask": b64(imaging::encode_mask_png(m)) }),
        }
    }

    /// Parses the response body expected for `cap`.
    pub fn from_json(cap: Capability, v: &Value) -> Result<Self, ProviderError> {
        let malformed = |what: &str| ProviderError::MalformedResponse(format!("missing {what}"));
        let image_err = |e: imaging::ImageError| ProviderError::MalformedResponse(e.to_string());
        Ok(match cap {
            Capability::EditImage => {
                let arr = v
                    .get("images")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("images"))?;
                let images = arr
                    .iter()
                    .map(|i| imaging::decode_image(&decode_b64_png(i)?).map_err(image_err))
                    .collect::<Result<_, _>>()?;
                Response::Images(images)
            }
            Capability::Describe | Capability::Judge => Response::Text(
                v.get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| malformed("text"))?
                    .to_string(),
            ),
            Capability::Embed => {
                let arr = v
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("embedding"))?;
                Response::Embedding(
                    arr.iter()
                        .map(|x| x.as_f64().ok_or_else(|| malformed("numeric embedding values")))
                        .collect::<Result<_, _>>()?,
                )
            }
            Capability::Segment => {
                let m = v.get("mask").ok_or_else(|| malformed("mask"))?;
                Response::Mask(imaging::decode_mask_png(&decode_b64_png(m)?).map_err(image_err)?)
            }
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            Response::Images(_) => "images",
            Response::Text(_) => "text",
            Response::Embedding(_) => "embedding",
            Response::Mask(_) => "mask",
        }
    }
}

/// Anything that can answer provider requests.
pub trait Backend: Send + Sync {
    fn call(&self, request: &Request) -> Result<Response, ProviderError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        (**self).call(request)
    }
}

struct Slot {
    backend: Arc<dyn Backend>,
    limit: Semaphore,
    retry: Option<RetryPolicy>,
}

/// Segmentation result; an empty mask is valid but flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub empty: bool,
}

/// One backend per capability, with checks, retries and concurrency limits.
pub struct Providers {
    slots: [Slot; 5],
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
}

pub const DEFAULT_CONCURRENCY: usize = 4;

pub struct ProvidersBuilder {
    backends: [Option<(Arc<dyn Backend>, usize)>; 5],
    slot_retry: [Option<RetryPolicy>; 5],
    retry: RetryPolicy,
    sleeper: Arc<dyn Sleeper>,
}

impl ProvidersBuilder {
    pub fn backend(mut self, cap: Capability, backend: Arc<dyn Backend>, concurrency: usize) -> Self {
        self.backends[cap as usize] = Some((backend, concurrency.max(1)));
        self
    }

    pub fn all(mut self, backend: Arc<dyn Backend>) -> Self {
        for cap in Capability::ALL {
            self = self.backend(cap, backend.clone(), DEFAULT_CONCURRENCY);
        }
        self
    }

    /// Overrides the retry policy for one capability.
    pub fn retry_for(mut self, cap: Capability, retry: RetryPolicy) -> Self {
        self.slot_retry[cap as usize] = Some(retry);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn build(self) -> Result<Providers, String> {
        let mut slots = Vec::with_capacity(5);
        for ((cap, b), retry) in Capability::ALL.into_iter().zip(self.backends).zip(self.slot_retry) {
            let (backend, n) = b.ok_or_else(|| format!("no backend for {}", cap.as_str()))?;
            slots.push(Slot {
                backend,
                limit: Semaphore::new(n),
                retry,
            });
        }
        Ok(Providers {
            slots: slots.try_into().unwrap_or_else(|_| unreachable!()),
            retry: self.retry,
            sleeper: self.sleeper,
        })
    }
}

fn unexpected(expected: &str, got: &Response) -> ProviderError {
    ProviderError::MalformedResponse(format!("expected {expected}, got {}", got.kind()))
}

impl Providers {
    pub fn builder() -> ProvidersBuilder {
        ProvidersBuilder {
            backends: Default::default(),
            slot_retry: Default::default(),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(ThreadSleeper),
        }
    }

    pub fn retry_policy(&self, cap: Capability) -> RetryPolicy {
        self.slots[cap as usize].retry.unwrap_or(self.retry)
    }

    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        let slot = &self.slots[request.capability() as usize];
        let _permit = slot.limit.acquire();
        let mut attempts = 0;
        slot.retry
            .unwrap_or(self.retry)
            .run(self.sleeper.as_ref(), || {
                attempts += 1;
                slot.backend.call(request)
            })
            .map_err(|e| e.with_attempts(attempts))
    }

    pub fn edit_image(&self, req: EditRequest) -> Result<Vec<Raster>, ProviderError> {
        if !(1..=10).contains(&req.n) {
            return Err(ProviderError::Precondition(format!(
                "n must be in 1..=10, got {}",
                req.n
            )));
        }
        if req.prompt.trim().is_empty() {
            return Err(ProviderError::Precondition("prompt is empty".into()));
        }
        let dims = req.image.dimensions();
        let n = req.n as usize;
        match self.call(&Request::Edit(req))? {
            Response::Images(images) => {
                if images.len() != n {
                    return Err(ProviderError::MalformedResponse(format!(
                        "expected {n} images, got {}",
                        images.len()
                    )));
                }
                if let Some(bad) = images.iter().find(|i| i.dimensions() != dims) {
                    return Err(ProviderError::MalformedResponse(format!(
                        "image is {:?}, input was {dims:?}",
                        bad.dimensions()
                    )));
                }
                Ok(images)
            }
            other => Err(unexpected("images", &other)),
        }
    }

    pub fn describe(&self, req: DescribeRequest) -> Result<String, ProviderError> {
        if req.system_prompt.trim().is_empty() || req.user_prompt.trim().is_empty() {
            return Err(ProviderError::Precondition("prompts must be non-empty".into()));
        }
        match self.call(&Request::Describe(req))? {
            Response::Text(t) if !t.trim().is_empty() => Ok(t),
            Response::Text(_) => Err(ProviderError::MalformedResponse("empty text".into())),
            other => Err(unexpected("text", &other)),
        }
    }

    pub fn embed(&self, image: &Raster) -> Result<Embedding, ProviderError> {
        match self.call(&Request::Embed(image.clone()))? {
            Response::Embedding(v) => Embedding::new(v).map_err(|e| ProviderError::MalformedResponse(e.to_string())),
            other => Err(unexpected("embedding", &other)),
        }
    }

    pub fn segment(&self, image: &Raster) -> Result<Segmentation, ProviderError> {
        match self.call(&Request::Segment(image.clone()))? {
            Response::Mask(mask) => {
                if mask.dimensions() != image.dimensions() {
                    return Err(ProviderError::MalformedResponse(format!(
                        "mask is {:?}, image is {:?}",
                        mask.dimensions(),
                        image.dimensions()
                    )));
                }
                let empty = mask.is_empty();
                Ok(Segmentation { mask, empty })
            }
            other => Err(unexpected("mask", &other)),
        }
    }

    /// Raw judge text, untouched.
    pub fn judge(&self, req: JudgeRequest) -> Result<String, ProviderError> {
        if req.prompt.trim().is_empty() {
            return Err(ProviderError::Precondition("prompt is empty".into()));
        }
        match self.call(&Request::Judge(req))? {
            Response::Text(t) => Ok(t),
            other => Err(unexpected("text", &other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bikelane_core::Rgb;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    struct Fixed(Response);
    impl Backend for Fixed {
        fn call(&self, _: &Request) -> Result<Response, ProviderError> {
            Ok(self.0.clone())
        }
    }

    struct FailN {
        remaining: AtomicU32,
        err: ProviderError,
    }
    impl Backend for FailN {
        fn call(&self, _: &Request) -> Result<Response, ProviderError> {
            if self.remaining.load(Ordering::SeqCst) > 0 {
                self.remaining.fetch_sub(1, Ordering::SeqCst);
                return Err(self.err.clone());
            }
            Ok(Response::Text("ok".into()))
        }
    }

    fn with(backend: impl Backend + 'static) -> Providers {
        Providers::builder()
            .all(Arc::new(backend))
            .sleeper(Arc::new(VirtualClock::default()))
            .build()
            .unwrap()
    }

    fn img() -> Raster {
        Raster::filled(4, 4, Rgb([1, 2, 3]))
    }

    fn edit(n: u32) -> EditRequest {
        EditRequest {
            image: img(),
            extra_images: vec![],
            system_prompt: None,
            prompt: "p".into(),
            n,
            seed: 0,
        }
    }

    #[test]
    fn edit_preconditions_and_postconditions() {
        let p = with(Fixed(Response::Images(vec![img(), img()])));
        assert!(matches!(p.edit_image(edit(0)), Err(ProviderError::Precondition(_))));
        assert!(matches!(p.edit_image(edit(11)), Err(ProviderError::Precondition(_))));
        assert_eq!(p.edit_image(edit(2)).unwrap().len(), 2);
        assert!(matches!(
            p.edit_image(edit(3)),
            Err(ProviderError::MalformedResponse(_))
        ));
        let wrong = with(Fixed(Response::Images(vec![Raster::filled(2, 2, Rgb([0; 3]))])));
        assert!(matches!(
            wrong.edit_image(edit(1)),
            Err(ProviderError::MalformedResponse(_))
        ));
    }

    #[test]
    fn segment_dimension_mismatch_and_empty_flag() {
        let p = with(Fixed(Response::Mask(Mask::zeros(3, 3))));
        assert!(matches!(p.segment(&img()), Err(ProviderError::MalformedResponse(_))));
        let p = with(Fixed(Response::Mask(Mask::zeros(4, 4))));
        assert!(p.segment(&img()).unwrap().empty);
    }

    #[test]
    fn judge_passes_empty_text_through() {
        let p = with(Fixed(Response::Text(String::new())));
        let req = JudgeRequest {
            image: img(),
            reference: None,
            system_prompt: "s".into(),
            prompt: "q".into(),
            final_prompt: None,
        };
        assert_eq!(p.judge(req).unwrap(), "");
    }

    #[test]
    fn retry_counts_attempts() {
        let clock = Arc::new(VirtualClock::default());
        let p = Providers::builder()
            .all(Arc::new(FailN {
                remaining: AtomicU32::new(10),
                err: ProviderError::Timeout { attempts: 1 },
            }))
            .retry(RetryPolicy::new(3, std::time::Duration::from_secs(1)))
            .sleeper(clock.clone())
            .build()
            .unwrap();
        let req = DescribeRequest {
            image: None,
            system_prompt: "s".into(),
            user_prompt: "u".into(),
            model: None,
        };
        assert_eq!(p.describe(req), Err(ProviderError::Timeout { attempts: 4 }));
        assert_eq!(clock.total().as_secs(), 1 + 2 + 4);
    }

    #[test]
    fn non_retryable_fails_fast() {
        let calls = Arc::new(Mutex::new(0));
        struct Auth(Arc<Mutex<u32>>);
        impl Backend for Auth {
            fn call(&self, _: &Request) -> Result<Response, ProviderError> {
                *self.0.lock().unwrap() += 1;
                Err(ProviderError::AuthFailure("bad key".into()))
            }
        }
        let p = with(Auth(calls.clone()));
        assert!(matches!(p.embed(&img()), Err(ProviderError::AuthFailure(_))));
        assert_eq!(*calls.lock().unwrap(), 1);
    }

    #[test]
    fn response_json_roundtrip() {
        let r = Response::Images(vec![img()]);
        assert_eq!(Response::from_json(Capability::EditImage, &r.to_json()).unwrap(), r);
        let m = Response::Mask(Mask::from_fn(4, 4, |x, _| x > 1));
        assert_eq!(Response::from_json(Capability::Segment, &m.to_json()).unwrap(), m);
        let e = Response::Embedding(vec![0.5, 0.25]);
        assert_eq!(Response::from_json(Capability::Embed, &e.to_json()).unwrap(), e);
        assert!(Response::from_json(Capability::Describe, &json!({"nope": 1})).is_err());
    }

    #[test]
    fn fingerprint_ignores_encoding_but_not_content() {
        let a = Request::Embed(img());
        let b = Request::Embed(Raster::filled(4, 4, Rgb([9, 9, 9])));
        assert_eq!(a.fingerprint(), Request::Embed(img()).fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), Request::Segment(img()).fingerprint());
    }
}
