//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest, ChatResponse, Part, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: String::new(),
            auth_env: "GUIDE_API_KEY".into(),
            timeout_secs: 300,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the token from the configured environment variable. A missing
    /// variable sends unauthenticated requests.
    pub fn new(config: HttpBackendConfig) -> Self {
        let token = std::env::var(&config.auth_env).ok().filter(|t| !t.is_empty());
        let agent = ureq::Agent::new_with_config(
            ureq::config::Config::builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .http_status_as_error(false)
                .build(),
        );
        Self {
            config,
            token,
            agent,
        }
    }

    pub fn has_credentials(&self) -> bool {
        self.token.is_some()
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let content: Vec<Value> = req
            .user_parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::Image { media_type, bytes } => {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                    json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{media_type};base64,{b64}")}
                    })
                }
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": content},
            ],
        });
        if let Some(t) = req.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = req.max_output {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

/// Pulls the assistant text and token usage out of a completion payload.
pub(crate) fn parse_completion(payload: &Value) -> Result<(String, Option<Usage>), BackendError> {
    let content = &payload["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // some providers return a list of content parts
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => {
            return Err(BackendError::Transport(format!(
                "unexpected content shape: {other}"
            )))
        }
    };
    let usage = payload.get("usage").map(|u| Usage {
        input_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
    });
    Ok((text, usage))
}

impl Backend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(self.request_body(req))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                status,
                body: body.chars().take(500).collect(),
            });
        }
        let payload: Value =
            serde_json::from_str(&body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let (text, usage) = parse_completion(&payload)?;
        Ok(ChatResponse {
            text,
            usage,
            latency: started.elapsed(),
        })
    }

    fn describe(&self) -> String {
        format!("http({} @ {})", self.config.model, self.config.endpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Stage;

    #[test]
    fn body_carries_parts_and_optional_knobs() {
        let b = HttpBackend::new(HttpBackendConfig {
            model: "m".into(),
            auth_env: "GUIDE_TEST_UNSET_TOKEN_VAR".into(),
            ..Default::default()
        });
        assert!(!b.has_credentials());
        let req = ChatRequest::new(
            Stage::Diagnose,
            "sys",
            vec![
                Part::Text("hi".into()),
                Part::Image {
                    media_type: "image/png".into(),
                    bytes: vec![1, 2, 3],
                },
            ],
        )
        .unwrap();
        let body = b.request_body(&req);
        assert!(body.get("temperature").is_none());
        let content = &body["messages"][1]["content"];
        assert_eq!(content[0]["text"], "hi");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AQID");
        let body = b.request_body(&req.with_temperature(Some(0.5)));
        assert_eq!(body["temperature"], 0.5);
    }

    #[test]
    fn parses_completion_payloads() {
        let p = json!({
            "choices": [{"message": {"content": "{\"a\":1}"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 3}
        });
        let (text, usage) = parse_completion(&p).unwrap();
        assert_eq!(text, "{\"a\":1}");
        assert_eq!(usage, Some(Usage { input_tokens: 10, output_tokens: 3 }));
        let p = json!({"choices": [{"message": {"content": [{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]});
        assert_eq!(parse_completion(&p).unwrap().0, "ab");
        let p = json!({"choices": []});
        assert_eq!(parse_completion(&p).unwrap().0, "");
    }
}
