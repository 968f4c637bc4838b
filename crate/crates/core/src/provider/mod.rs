//! Chat-completion and embedding contracts.
//!
//! Providers only move text. Every caller parses and validates the reply
//! itself, so a live model and the offline stubs are interchangeable.

mod embed;
mod live;
pub mod prompts;
mod stub;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, embed_batch, EmbeddingVector, Embedder, HashEmbedder};
pub use live::{HttpChat, HttpEmbedder, LiveConfig};
pub use stub::StubChat;

use crate::text::{sha256_hex, token_count};

/// Output grammar a request expects; also the stub's dispatch key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    EntityRecognition,
    EntityResolution,
    ClassRecognition,
    ClassResolution,
    RelationRecognition,
    RelationResolution,
    RetentionJudge,
    SchemaVerify,
}

impl StageTag {
    pub const ALL: [StageTag; 8] = [
        StageTag::EntityRecognition,
        StageTag::EntityResolution,
        StageTag::ClassRecognition,
        StageTag::ClassResolution,
        StageTag::RelationRecognition,
        StageTag::RelationResolution,
        StageTag::RetentionJudge,
        StageTag::SchemaVerify,
    ];
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub expect: StageTag,
}

impl ChatRequest {
    pub fn new(prompt: String, max_tokens: usize, expect: StageTag) -> Self {
        ChatRequest {
            prompt,
            max_tokens,
            expect,
        }
    }

    /// Stable request id: the first 16 hex digits of the prompt's SHA-256.
    pub fn request_id(&self) -> String {
        sha256_hex(&self.prompt)[..16].to_string()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("request {request_id}: transport failure: {message}")]
    Transport { request_id: String, message: String },
    #[error("request {request_id}: prompt of {tokens} tokens exceeds budget {budget}")]
    BudgetExceeded {
        request_id: String,
        tokens: usize,
        budget: usize,
    },
    #[error("request {request_id}: no canned reply")]
    NoReply { request_id: String },
    #[error("embedding input {index}: {reason}")]
    Embedding { index: usize, reason: String },
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }
}

pub trait ChatProvider: Send + Sync {
    /// Short identity string recorded in run manifests.
    fn identity(&self) -> String;
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError>;
}

/// Budget-checked call. Prompts over `max_tokens` whitespace tokens are
/// rejected before they reach the provider.
pub fn chat(provider: &dyn ChatProvider, req: &ChatRequest) -> Result<String, ProviderError> {
    let tokens = token_count(&req.prompt);
    if tokens > req.max_tokens {
        return Err(ProviderError::BudgetExceeded {
            request_id: req.request_id(),
            tokens,
            budget: req.max_tokens,
        });
    }
    provider.complete(req)
}

/// Replies looked up by prompt hash.
#[derive(Default, Clone)]
pub struct CannedChat {
    replies: HashMap<String, String>,
}

impl CannedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reply(mut self, prompt: &str, reply: &str) -> Self {
        self.replies.insert(sha256_hex(prompt), reply.to_string());
        self
    }
}

impl ChatProvider for CannedChat {
    fn identity(&self) -> String {
        format!("canned({})", self.replies.len())
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.replies
            .get(&sha256_hex(&req.prompt))
            .cloned()
            .ok_or_else(|| ProviderError::NoReply {
                request_id: req.request_id(),
            })
    }
}

/// Chat provider that answers from a closure; handy for scripted tests.
pub struct FnChat<F>(pub F);

impl<F> ChatProvider for FnChat<F>
where
    F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync,
{
    fn identity(&self) -> String {
        "scripted".to_string()
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        (self.0)(req)
    }
}

/// Sends each request to the provider configured for its stage.
pub struct RoutedChat {
    pub default: Arc<dyn ChatProvider>,
    pub routes: Vec<(StageTag, Arc<dyn ChatProvider>)>,
}

impl RoutedChat {
    fn pick(&self, tag: StageTag) -> &Arc<dyn ChatProvider> {
        self.routes.iter().find(|(t, _)| *t == tag).map_or(&self.default, |(_, p)| p)
    }
}

impl ChatProvider for RoutedChat {
    fn identity(&self) -> String {
        let mut s = self.default.identity();
        for (t, p) in &self.routes {
            s.push_str(&format!("; {t}={}", p.identity()));
        }
        s
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.pick(req.expect).complete(req)
    }
}

/// Providers used by one pipeline run.
#[derive(Clone)]
pub struct Providers {
    pub chat: Arc<dyn ChatProvider>,
    pub embedder: Arc<dyn Embedder>,
}

impl Providers {
    pub fn stub() -> Self {
        Providers {
            chat: Arc::new(StubChat::default()),
            embedder: Arc::new(HashEmbedder::default()),
        }
    }
}

/// One logged provider exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub stage: StageTag,
    pub request_id: String,
    pub max_tokens: usize,
    pub prompt: String,
    pub reply: Option<String>,
    pub error: Option<String>,
}

/// Call the provider and produce the log record alongside the reply.
pub fn logged_chat(provider: &dyn ChatProvider, req: ChatRequest) -> (Result<String, ProviderError>, PromptRecord) {
    let result = chat(provider, &req);
    let record = PromptRecord {
        stage: req.expect,
        request_id: req.request_id(),
        max_tokens: req.max_tokens,
        reply: result.as_ref().ok().cloned(),
        error: result.as_ref().err().map(|e| e.to_string()),
        prompt: req.prompt,
    };
    (result, record)
}
