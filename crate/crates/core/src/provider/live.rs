use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, Embedder, ProviderError};

/// Endpoint settings for an OpenAI-compatible HTTP API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint: "https://api.openai.com/v1".to_string(),
            model: "gpt-5.1".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            timeout_secs: 120,
        }
    }
}

fn agent(cfg: &LiveConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
        .http_status_as_error(true)
        .build()
        .into()
}

fn post(agent: &ureq::Agent, cfg: &LiveConfig, path: &str, body: &Value) -> Result<Value, String> {
    let url = format!("{}/{}", cfg.endpoint.trim_end_matches('/'), path);
    let mut req = agent.post(&url).header("Content-Type", "application/json");
    if let Ok(key) = std::env::var(&cfg.api_key_env) {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
    resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
}

/// Chat-completions adapter. No sampling temperature is sent.
pub struct HttpChat {
    cfg: LiveConfig,
    agent: ureq::Agent,
}

impl HttpChat {
    pub fn new(cfg: LiveConfig) -> Self {
        HttpChat {
            agent: agent(&cfg),
            cfg,
        }
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_completion_tokens": req.max_tokens,
        })
    }
}

impl ChatProvider for HttpChat {
    fn identity(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.endpoint)
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let transport = |message: String| ProviderError::Transport {
            request_id: req.request_id(),
            message,
        };
        let resp = post(&self.agent, &self.cfg, "chat/completions", &self.request_body(req)).map_err(transport)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| transport("response has no choices[0].message.content".to_string()))
    }
}

/// Embeddings adapter (`POST {endpoint}/embeddings`).
pub struct HttpEmbedder {
    cfg: LiveConfig,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(cfg: LiveConfig) -> Self {
        HttpEmbedder {
            agent: agent(&cfg),
            cfg,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn identity(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.endpoint)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({"model": self.cfg.model, "input": texts});
        let resp = post(&self.agent, &self.cfg, "embeddings", &body).map_err(|message| ProviderError::Transport {
            request_id: format!("embed[{}]", texts.len()),
            message,
        })?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Embedding {
                index: 0,
                reason: "response has no data array".to_string(),
            })?;
        data.iter()
            .enumerate()
            .map(|(i, item)| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .map(|xs| xs.iter().filter_map(Value::as_f64).collect())
                    .ok_or_else(|| ProviderError::Embedding {
                        index: i,
                        reason: "missing embedding".to_string(),
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{chat, StageTag};

    fn unreachable() -> LiveConfig {
        LiveConfig {
            endpoint: "http://127.0.0.1:9/v1".to_string(),
            timeout_secs: 2,
            ..LiveConfig::default()
        }
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error_with_request_id() {
        let provider = HttpChat::new(unreachable());
        let req = ChatRequest::new("ping".into(), 10, StageTag::RetentionJudge);
        match chat(&provider, &req) {
            Err(ProviderError::Transport { request_id, .. }) => assert_eq!(request_id, req.request_id()),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn request_body_has_no_temperature() {
        let provider = HttpChat::new(LiveConfig::default());
        let body = provider.request_body(&ChatRequest::new("p".into(), 8000, StageTag::EntityRecognition));
        assert!(body.get("temperature").is_none());
        assert_eq!(body["max_completion_tokens"], 8000);
    }

    #[test]
    fn embedder_transport_error() {
        let e = HttpEmbedder::new(unreachable());
        assert!(e.embed(&["x".to_string()]).unwrap_err().is_retriable());
    }
}
