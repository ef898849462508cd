//! Chat-completion gateway for the three model roles: the question model that
//! talks to the patient, the report model that extracts field values, and the
//! judge used by the simulator.
//!
//! Two backends exist: [`ScriptedProvider`] for deterministic tests and
//! simulation, and [`HttpChatProvider`] for a local chat-completions endpoint.
//! The session layer only ever calls [`complete_or_degrade`], so it never
//! observes a provider error.

mod http;
pub mod prompts;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use http::HttpChatProvider;
pub use prompts::{
    build_extraction_prompt, build_judge_prompt, build_open_question_prompt,
    build_question_prompt, build_summary_prompt, render_segment, QuestionStage, PROMPT_VERSION,
};
pub use scripted::{ScriptEntry, ScriptedProvider};

pub const ENV_LLM_ENDPOINT: &str = "FOLLOWUP_LLM_ENDPOINT";
pub const ENV_LLM_MODEL: &str = "FOLLOWUP_LLM_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    QuestionLlm,
    ReportLlm,
    JudgeLlm,
}

impl RoleTag {
    pub fn default_temperature(self) -> f64 {
        match self {
            RoleTag::QuestionLlm => 0.7,
            RoleTag::ReportLlm | RoleTag::JudgeLlm => 0.0,
        }
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            RoleTag::QuestionLlm => 128,
            RoleTag::ReportLlm => 64,
            RoleTag::JudgeLlm => 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub speaker: ChatRole,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: ChatRole::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            speaker: ChatRole::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
    /// Text used when the backend cannot produce a reply.
    pub fallback: String,
    /// Structured context for test doubles (field id, label, purpose...).
    /// Never sent over the wire.
    pub metadata: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(role_tag: RoleTag, system_prompt: String, messages: Vec<ChatMessage>) -> Self {
        Self {
            role_tag,
            system_prompt,
            messages,
            max_tokens: role_tag.default_max_tokens(),
            temperature: role_tag.default_temperature(),
            seed: None,
            fallback: String::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.messages.is_empty() {
            return Err(ProviderError::InvalidRequest("messages are empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// System prompt and message texts joined by newlines; what scripted
    /// entries match against.
    pub fn haystack(&self) -> String {
        let mut s = self.system_prompt.clone();
        for m in &self.messages {
            s.push('\n');
            s.push_str(&m.text);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider_id: String,
    pub latency: Duration,
    /// The text came from the fallback policy, not a model.
    pub degraded: bool,
}

impl ChatResponse {
    pub fn degraded(request: &ChatRequest, provider_id: &str, latency: Duration) -> Self {
        Self {
            text: request.fallback.clone(),
            provider_id: provider_id.to_string(),
            latency,
            degraded: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("script exhausted for {0:?}")]
    ScriptExhausted(RoleTag),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("invalid provider config: {0}")]
    Config(String),
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
}

pub fn complete(request: &ChatRequest, provider: &dyn ChatProvider) -> Result<ChatResponse, ProviderError> {
    request.validate()?;
    provider.complete(request)
}

/// Call the provider; any error becomes a degraded response carrying the
/// request's fallback text.
pub fn complete_or_degrade(provider: &dyn ChatProvider, request: &ChatRequest) -> ChatResponse {
    match complete(request, provider) {
        Ok(r) => r,
        Err(e) => {
            warn!(provider = provider.id(), role = ?request.role_tag, error = %e, "provider failed, degrading");
            ChatResponse::degraded(request, provider.id(), Duration::ZERO)
        }
    }
}

/// A provider that always fails. Useful for liveness tests.
#[derive(Debug, Default, Clone)]
pub struct FailingProvider;

impl ChatProvider for FailingProvider {
    fn id(&self) -> &str {
        "failing"
    }
    fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        Err(ProviderError::Transport("always fails".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Scripted,
    Http,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Backend::Scripted),
            "http" => Ok(Backend::Http),
            other => Err(format!("unknown backend \"{other}\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub backend: Backend,
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub model_name: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff_base: Duration,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            endpoint_url: String::new(),
            model_name: String::new(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff_base: Duration::from_millis(250),
        }
    }
}

impl ProviderConfig {
    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            backend: Backend::Http,
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    /// HTTP config from `FOLLOWUP_LLM_ENDPOINT` / `FOLLOWUP_LLM_MODEL`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let endpoint = std::env::var(ENV_LLM_ENDPOINT)
            .map_err(|_| ProviderError::Config(format!("{ENV_LLM_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_LLM_MODEL).unwrap_or_else(|_| "local".into());
        let cfg = Self::http(endpoint, model);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.backend == Backend::Http && self.endpoint_url.trim().is_empty() {
            return Err(ProviderError::Config("http backend needs endpoint_url".into()));
        }
        Ok(())
    }
}

/// The providers a session engine needs.
#[derive(Clone)]
pub struct ProviderSet {
    pub question: Arc<dyn ChatProvider>,
    pub report: Arc<dyn ChatProvider>,
    pub judge: Arc<dyn ChatProvider>,
}

impl ProviderSet {
    pub fn uniform(provider: Arc<dyn ChatProvider>) -> Self {
        Self {
            question: provider.clone(),
            report: provider.clone(),
            judge: provider,
        }
    }

    pub fn for_role(&self, role: RoleTag) -> &dyn ChatProvider {
        match role {
            RoleTag::QuestionLlm => self.question.as_ref(),
            RoleTag::ReportLlm => self.report.as_ref(),
            RoleTag::JudgeLlm => self.judge.as_ref(),
        }
    }
}

/// Replace `{key}` placeholders from `vars`. Unknown placeholders stay as written.
pub fn fill_placeholders(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let key = &after[..close];
                match vars.get(key) {
                    Some(v) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders() {
        let mut vars = BTreeMap::new();
        vars.insert("label".to_string(), "headache".to_string());
        assert_eq!(fill_placeholders("Do you have {label}?", &vars), "Do you have headache?");
        assert_eq!(fill_placeholders("{missing} {label}", &vars), "{missing} headache");
        assert_eq!(fill_placeholders("json {\"a\": 1}", &vars), "json {\"a\": 1}");
        assert_eq!(fill_placeholders("unclosed {label", &vars), "unclosed {label");
    }

    #[test]
    fn failing_provider_degrades() {
        let mut req = ChatRequest::new(RoleTag::QuestionLlm, "s".into(), vec![ChatMessage::user("hi")]);
        req.fallback = "Do you have headache?".into();
        let r = complete_or_degrade(&FailingProvider, &req);
        assert!(r.degraded);
        assert_eq!(r.text, "Do you have headache?");
    }

    #[test]
    fn request_validation() {
        let req = ChatRequest::new(RoleTag::ReportLlm, "s".into(), vec![]);
        assert!(req.validate().is_err());
        assert_eq!(ChatRequest::new(RoleTag::ReportLlm, "s".into(), vec![ChatMessage::user("x")]).temperature, 0.0);
        assert!(ProviderConfig { backend: Backend::Http, ..Default::default() }.validate().is_err());
    }
}
