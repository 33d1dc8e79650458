//! Gemini-compatible `generateContent` adapter.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, DecodingParams, GatewayError};
use crate::prompt::PromptInstance;

pub const DEFAULT_GEMINI_ENDPOINT: &str =
    "https://generativelanguage.googleapis.com/v1beta/models/gemini-1.5-flash:generateContent";

pub struct GeminiBackend {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl GeminiBackend {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

/// JSON request body for one prompt.
pub fn request_body(prompt: &str, decoding: &DecodingParams) -> Value {
    let mut generation = serde_json::Map::new();
    generation.insert("temperature".into(), json!(decoding.temperature));
    generation.insert("candidateCount".into(), json!(1));
    if let Some(p) = decoding.top_p {
        generation.insert("topP".into(), json!(p));
    }
    if decoding.frequency_penalty != 0.0 {
        generation.insert("frequencyPenalty".into(), json!(decoding.frequency_penalty));
    }
    json!({
        "contents": [{ "role": "user", "parts": [{ "text": prompt }] }],
        "generationConfig": Value::Object(generation),
    })
}

/// Extracts the generated text, mapping blocks and empty answers to
/// content errors.
pub fn parse_response(body: &Value) -> Result<String, GatewayError> {
    if let Some(reason) = body
        .pointer("/promptFeedback/blockReason")
        .and_then(Value::as_str)
    {
        return Err(GatewayError::Content(format!("prompt blocked: {reason}")));
    }
    let Some(candidate) = body.pointer("/candidates/0") else {
        return Err(GatewayError::Content("no candidates in response".into()));
    };
    let text: String = candidate
        .pointer("/content/parts")
        .and_then(Value::as_array)
        .map(|parts| {
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect()
        })
        .unwrap_or_default();
    if text.trim().is_empty() {
        let finish = candidate
            .get("finishReason")
            .and_then(Value::as_str)
            .unwrap_or("UNKNOWN");
        return Err(GatewayError::Content(format!(
            "empty completion (finishReason {finish})"
        )));
    }
    Ok(text)
}

fn classify_status(code: u16, body: String) -> GatewayError {
    let snippet: String = body.chars().take(200).collect();
    match code {
        401 | 403 => GatewayError::Fatal(format!("authentication failed (HTTP {code}): {snippet}")),
        408 | 429 | 500..=599 => GatewayError::Transient(format!("HTTP {code}: {snippet}")),
        _ => GatewayError::Fatal(format!("request rejected (HTTP {code}): {snippet}")),
    }
}

impl Backend for GeminiBackend {
    fn provider_tag(&self) -> String {
        format!("gemini:{}", self.endpoint)
    }

    fn generate(
        &self,
        instance: &PromptInstance,
        _sample_index: u32,
        decoding: &DecodingParams,
    ) -> Result<String, GatewayError> {
        let body = request_body(&instance.rendered_text, decoding);
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("x-goog-api-key", &self.api_key)
            .set("content-type", "application/json")
            .send_json(body);
        match resp {
            Ok(r) => {
                let v: Value = r.into_json().map_err(|e| {
                    GatewayError::Transient(format!("unreadable response body: {e}"))
                })?;
                parse_response(&v)
            }
            Err(ureq::Error::Status(code, r)) => {
                Err(classify_status(code, r.into_string().unwrap_or_default()))
            }
            Err(ureq::Error::Transport(t)) => Err(GatewayError::Transient(t.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape_under_greedy_defaults() {
        let b = request_body("hi", &DecodingParams::default());
        assert_eq!(b["contents"][0]["parts"][0]["text"], "hi");
        assert_eq!(b["generationConfig"]["temperature"], 0.0);
        assert!(b["generationConfig"].get("topP").is_none());
        assert!(b["generationConfig"].get("frequencyPenalty").is_none());
    }

    #[test]
    fn response_parsing() {
        let ok = json!({"candidates": [{"content": {"parts": [{"text": "1. A\n"}, {"text": "2. B"}]}, "finishReason": "STOP"}]});
        assert_eq!(parse_response(&ok).unwrap(), "1. A\n2. B");
        let blocked = json!({"promptFeedback": {"blockReason": "SAFETY"}});
        assert!(matches!(
            parse_response(&blocked),
            Err(GatewayError::Content(_))
        ));
        let empty = json!({"candidates": [{"content": {"parts": []}, "finishReason": "SAFETY"}]});
        assert!(
            matches!(parse_response(&empty), Err(GatewayError::Content(m)) if m.contains("SAFETY"))
        );
        assert!(matches!(
            parse_response(&json!({})),
            Err(GatewayError::Content(_))
        ));
    }

    #[test]
    fn status_classes() {
        assert!(matches!(
            classify_status(401, String::new()),
            GatewayError::Fatal(_)
        ));
        assert!(matches!(
            classify_status(429, String::new()),
            GatewayError::Transient(_)
        ));
        assert!(matches!(
            classify_status(503, String::new()),
            GatewayError::Transient(_)
        ));
        assert!(matches!(
            classify_status(400, String::new()),
            GatewayError::Fatal(_)
        ));
    }
}
