//! Generic JSON-over-HTTP provider.
//!
//! `POST {endpoint}/{capability}` with the request serialized with inline
//! base64 PNG images, plus `"model"` and `"params"` from config. Responses use
//! the same shapes as recorded fixtures.

use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

use super::{Backend, ImageEncoding, ProviderError, Request, Response};

pub struct HttpBackend {
    client: Client,
    endpoint: url::Url,
    token: Option<String>,
    model: Option<String>,
    params: BTreeMap<String, Value>,
}

impl HttpBackend {
    pub fn new(
        endpoint: url::Url,
        token: Option<String>,
        timeout: Duration,
        model: Option<String>,
        params: BTreeMap<String, Value>,
    ) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            token,
            model,
            params,
        })
    }

    fn url(&self, request: &Request) -> Result<url::Url, ProviderError> {
        let mut base = self.endpoint.clone();
        if !base.path().ends_with('/') {
            base.set_path(&format!("{}/", base.path()));
        }
        base.join(request.capability().as_str())
            .map_err(|e| ProviderError::Transport(e.to_string()))
    }
}

pub(crate) fn classify(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout { attempts: 1 }
    } else {
        ProviderError::Transport(e.to_string())
    }
}

/// Maps non-success statuses onto provider errors.
pub(crate) fn check_status(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ProviderError> {
    match resp.status() {
        s @ (StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN) => Err(ProviderError::AuthFailure(s.to_string())),
        StatusCode::TOO_MANY_REQUESTS => Err(ProviderError::RateLimited { attempts: 1 }),
        StatusCode::REQUEST_TIMEOUT | StatusCode::GATEWAY_TIMEOUT => Err(ProviderError::Timeout { attempts: 1 }),
        s if !s.is_success() => Err(ProviderError::Upstream {
            status: s.as_u16(),
            body: resp.text().unwrap_or_default(),
        }),
        _ => Ok(resp),
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &Request) -> Result<Response, ProviderError> {
        let mut body = request.to_json(ImageEncoding::Inline);
        if let Value::Object(map) = &mut body {
            let requested = map.get("model").is_some_and(|m| !m.is_null());
            if let (false, Some(m)) = (requested, &self.model) {
                map.insert("model".into(), Value::String(m.clone()));
            }
            if !self.params.is_empty() {
                map.insert("params".into(), serde_json::to_value(&self.params).unwrap_or_default());
            }
        }
        let mut req = self.client.post(self.url(request)?).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = check_status(req.send().map_err(classify)?)?;
        let v: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                classify(e)
            } else {
                ProviderError::MalformedResponse(e.to_string())
            }
        })?;
        Response::from_json(request.capability(), &v)
    }
}
