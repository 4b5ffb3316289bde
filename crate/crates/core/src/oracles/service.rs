//! HTTP service adapters.
//!
//! Adapters never crash a run: every failure (timeout, bad status, malformed
//! payload, missing attribute) surfaces as a typed [`OracleError`] that the
//! evaluation layer logs and skips. Credentials come only from the
//! environment variable named in the binding.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::{
    EmbeddingOracle, ModerationOracle, OracleError, ResponseOracle, ServiceBinding,
};
use crate::model::normalize_embedding;

/// Provider attribute names in canonical component order (Perspective-style).
pub const PROVIDER_ATTRIBUTES: [&str; 8] = [
    "TOXICITY",
    "SEVERE_TOXICITY",
    "INSULT",
    "THREAT",
    "IDENTITY_ATTACK",
    "PROFANITY",
    "SEXUALLY_EXPLICIT",
    "FLIRTATION",
];

/// Counting semaphore bounding in-flight requests per binding.
struct Gate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            slots: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap();
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.gate.slots.lock().unwrap();
        *slots += 1;
        self.gate.cv.notify_one();
    }
}

struct ServiceClient {
    binding: ServiceBinding,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl ServiceClient {
    fn new(binding: ServiceBinding) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(binding.timeout_ms))
            .build()
            .map_err(|e| OracleError::Other(format!("client construction failed: {e}")))?;
        let gate = Gate::new(binding.concurrency);
        Ok(ServiceClient {
            binding,
            client,
            gate,
        })
    }

    fn url(&self) -> Result<String, OracleError> {
        match &self.binding.credential_env {
            Some(var) => {
                let key = std::env::var(var).map_err(|_| {
                    OracleError::Other(format!("credential env var {var} is not set"))
                })?;
                let sep = if self.binding.endpoint.contains('?') { '&' } else { '?' };
                Ok(format!("{}{}key={}", self.binding.endpoint, sep, key))
            }
            None => Ok(self.binding.endpoint.clone()),
        }
    }

    /// POST a JSON body with bounded retries on timeouts and 5xx responses.
    fn post_json(&self, body: &Value) -> Result<Value, OracleError> {
        let _slot = self.gate.acquire();
        let url = self.url()?;
        let attempts = self.binding.retries + 1;
        let mut last_err = None;
        for _ in 0..attempts {
            match self.client.post(&url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Value>().map_err(|e| {
                            OracleError::MalformedPayload(format!("invalid JSON body: {e}"))
                        });
                    }
                    let detail = resp.text().unwrap_or_default();
                    let err = OracleError::Status {
                        status: status.as_u16(),
                        detail: detail.chars().take(200).collect(),
                    };
                    if status.is_server_error() {
                        last_err = Some(err);
                        continue;
                    }
                    return Err(err);
                }
                Err(e) if e.is_timeout() => {
                    last_err = Some(OracleError::Timeout {
                        attempts,
                        detail: e.to_string(),
                    });
                }
                Err(e) => return Err(OracleError::Other(e.to_string())),
            }
        }
        Err(last_err.unwrap_or_else(|| OracleError::Other("request failed".into())))
    }
}

// ---------------------------------------------------------------------------
// Moderation
// ---------------------------------------------------------------------------

pub struct ServiceModeration {
    client: ServiceClient,
    d_p: usize,
}

impl ServiceModeration {
    pub fn new(binding: ServiceBinding, d_p: usize) -> Result<Self, OracleError> {
        Ok(ServiceModeration {
            client: ServiceClient::new(binding)?,
            d_p,
        })
    }
}

/// Map a Perspective-style `attributeScores` payload onto the fixed component
/// order, erroring on any missing attribute or out-of-range value.
pub fn parse_moderation_payload(payload: &Value, d_p: usize) -> Result<Vec<f64>, OracleError> {
    let attrs = payload
        .get("attributeScores")
        .and_then(Value::as_object)
        .ok_or_else(|| OracleError::MalformedPayload("missing attributeScores object".into()))?;
    let mut out = Vec::with_capacity(d_p);
    for name in PROVIDER_ATTRIBUTES.iter().take(d_p) {
        let value = attrs
            .get(*name)
            .and_then(|a| a.get("summaryScore"))
            .and_then(|s| s.get("value"))
            .and_then(Value::as_f64)
            .ok_or_else(|| OracleError::MissingAttribute((*name).to_string()))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(OracleError::MalformedPayload(format!(
                "{name} score {value} outside [0,1]"
            )));
        }
        out.push(value);
    }
    Ok(out)
}

impl ModerationOracle for ServiceModeration {
    fn moderate(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        let mut requested = serde_json::Map::new();
        for name in PROVIDER_ATTRIBUTES.iter().take(self.d_p) {
            requested.insert((*name).to_string(), Value::Object(Default::default()));
        }
        let body = serde_json::json!({
            "comment": {"text": text},
            "requestedAttributes": Value::Object(requested),
        });
        let payload = self.client.post_json(&body)?;
        parse_moderation_payload(&payload, self.d_p)
    }
}

// ---------------------------------------------------------------------------
// Response generation
// ---------------------------------------------------------------------------

pub struct ServiceResponse {
    client: ServiceClient,
}

impl ServiceResponse {
    pub fn new(binding: ServiceBinding) -> Result<Self, OracleError> {
        Ok(ServiceResponse {
            client: ServiceClient::new(binding)?,
        })
    }
}

impl ResponseOracle for ServiceResponse {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        let body = serde_json::json!({"prompt": prompt});
        let payload = self.client.post_json(&body)?;
        payload
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| OracleError::MalformedPayload("missing text field".into()))
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

pub struct ServiceEmbedding {
    client: ServiceClient,
    d_g: usize,
}

impl ServiceEmbedding {
    pub fn new(binding: ServiceBinding, d_g: usize) -> Result<Self, OracleError> {
        Ok(ServiceEmbedding {
            client: ServiceClient::new(binding)?,
            d_g,
        })
    }
}

impl EmbeddingOracle for ServiceEmbedding {
    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        let body = serde_json::json!({"text": text});
        let payload = self.client.post_json(&body)?;
        let raw: Vec<f64> = payload
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| OracleError::MalformedPayload("missing embedding array".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect();
        if raw.len() != self.d_g {
            return Err(OracleError::MalformedPayload(format!(
                "embedding has {} dims, expected {}",
                raw.len(),
                self.d_g
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::MalformedPayload(
                "embedding contains non-numeric values".into(),
            ));
        }
        normalize_embedding(raw).map_err(OracleError::MalformedPayload)
    }
}
