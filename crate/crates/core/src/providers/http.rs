//! Blocking JSON client for the model-server HTTP contract.

use std::sync::atomic::{AtomicU64, Ordering};

use base64::Engine;
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    validate_phrase, BackendName, EmbeddingVector, GenerationRequest, ImagePayload, InFlightLimiter, Provider,
    ProviderEndpoint, ProviderError, RetryPolicy,
};
use crate::metrics::{ProviderScore, ScoreMethod};

const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthInfo {
    pub backend: String,
    pub model_id: String,
}

#[derive(Deserialize)]
struct VectorResponse {
    vector: Vec<f32>,
    dim: usize,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
    method: String,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

#[derive(Deserialize)]
struct ErrorEnvelope {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct ErrorBody {
    code: String,
    message: String,
}

pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    client: Client,
    limiter: InFlightLimiter,
    retry: RetryPolicy,
    next_id: AtomicU64,
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint) -> Result<Self, ProviderError> {
        endpoint.validate()?;
        let client = Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            limiter: InFlightLimiter::new(endpoint.max_in_flight),
            retry: RetryPolicy::with_budget(endpoint.retry_budget),
            client,
            endpoint,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    /// Highest number of simultaneous requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    pub fn health(&self) -> Result<HealthInfo, ProviderError> {
        self.retry.run(|| self.send::<HealthInfo>(None, "/v1/health"))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    fn post<R: DeserializeOwned>(&self, path: &str, body: serde_json::Value) -> Result<R, ProviderError> {
        self.retry.run(|| self.send(Some(&body), path))
    }

    fn send<R: DeserializeOwned>(&self, body: Option<&serde_json::Value>, path: &str) -> Result<R, ProviderError> {
        let _permit = self.limiter.acquire();
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let mut req = match body {
            Some(b) => self.client.post(self.url(path)).json(b),
            None => self.client.get(self.url(path)),
        };
        req = req.header(REQUEST_ID_HEADER, &request_id);
        if let Some(token) = &self.endpoint.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| self.map_transport(e))?;
        let status = resp.status();
        if let Some(echo) = resp.headers().get(REQUEST_ID_HEADER) {
            if echo.as_bytes() != request_id.as_bytes() {
                return Err(ProviderError::Decode(format!(
                    "response correlation id {:?} does not match request {request_id}",
                    String::from_utf8_lossy(echo.as_bytes())
                )));
            }
        }
        let bytes = resp.bytes().map_err(|e| self.map_transport(e))?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ErrorEnvelope>(&bytes) {
                Ok(env) => ProviderError::Backend {
                    code: env.error.code,
                    message: env.error.message,
                    status: Some(status.as_u16()),
                },
                Err(_) => ProviderError::Backend {
                    code: status.as_u16().to_string(),
                    message: String::from_utf8_lossy(&bytes).chars().take(200).collect(),
                    status: Some(status.as_u16()),
                },
            });
        }
        // a 200 carrying an error envelope is still an error
        if let Ok(env) = serde_json::from_slice::<ErrorEnvelope>(&bytes) {
            return Err(ProviderError::Backend {
                code: env.error.code,
                message: env.error.message,
                status: None,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ProviderError::Decode(e.to_string()))
    }

    fn map_transport(&self, e: reqwest::Error) -> ProviderError {
        if e.is_timeout() {
            ProviderError::Timeout(self.endpoint.timeout)
        } else {
            ProviderError::Transport(e.to_string())
        }
    }

    fn unsupported(&self, operation: &'static str) -> ProviderError {
        ProviderError::Unsupported {
            backend: self.endpoint.backend_name.to_string(),
            operation,
        }
    }

    fn b64(image: &ImagePayload) -> String {
        base64::engine::general_purpose::STANDARD.encode(image.bytes())
    }

    fn vector(resp: VectorResponse) -> Result<EmbeddingVector, ProviderError> {
        if resp.dim != resp.vector.len() {
            return Err(ProviderError::Decode(format!(
                "dim {} does not match vector length {}",
                resp.dim,
                resp.vector.len()
            )));
        }
        EmbeddingVector::normalized(resp.vector)
    }
}

pub(crate) fn parse_method(s: &str) -> Option<ScoreMethod> {
    match s {
        "cosine" | "cosine_clamped" => Some(ScoreMethod::CosineClamped),
        "sigmoid" | "sigmoid_prob" => Some(ScoreMethod::SigmoidProb),
        "itm" | "itm_prob" => Some(ScoreMethod::ItmProb),
        _ => None,
    }
}

impl Provider for HttpProvider {
    fn backend(&self) -> BackendName {
        self.endpoint.backend_name
    }

    fn embed_image(&self, crop: &ImagePayload) -> Result<EmbeddingVector, ProviderError> {
        if self.backend() == BackendName::Vlm {
            return Err(self.unsupported("embed_image"));
        }
        Self::vector(self.post("/v1/embed_image", json!({ "image_b64": Self::b64(crop) }))?)
    }

    fn embed_text(&self, phrase: &str) -> Result<EmbeddingVector, ProviderError> {
        validate_phrase(phrase)?;
        if self.backend() == BackendName::Vlm {
            return Err(self.unsupported("embed_text"));
        }
        Self::vector(self.post("/v1/embed_text", json!({ "text": phrase }))?)
    }

    fn pair_score(&self, crop: &ImagePayload, phrase: &str) -> Result<ProviderScore<f64>, ProviderError> {
        validate_phrase(phrase)?;
        match self.score_method() {
            Some(m) if !m.is_cosine() => {}
            _ => return Err(self.unsupported("pair_score")),
        }
        let resp: ScoreResponse = self.post(
            "/v1/pair_score",
            json!({ "image_b64": Self::b64(crop), "text": phrase }),
        )?;
        let method = parse_method(&resp.method)
            .ok_or_else(|| ProviderError::Decode(format!("unknown score method '{}'", resp.method)))?;
        ProviderScore::new(resp.score, method).map_err(|e| ProviderError::Decode(e.to_string()))
    }

    fn generate_relation(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        request.validate()?;
        if self.backend() != BackendName::Vlm {
            return Err(self.unsupported("generate"));
        }
        let resp: TextResponse = self.post(
            "/v1/generate",
            json!({
                "image_b64": Self::b64(&request.image),
                "prompt": request.prompt_text,
                "max_tokens": request.decode.max_tokens,
                "temperature": request.decode.temperature,
            }),
        )?;
        Ok(resp.text)
    }
}
