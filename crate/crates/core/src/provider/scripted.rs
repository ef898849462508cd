use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{fill_placeholders, ChatProvider, ChatRequest, ChatResponse, ChatRole, ProviderError, RoleTag};

/// One scripted reply. `match` is a substring of the request (system prompt
/// plus messages); empty matches anything. Non-repeating entries are used once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub role_tag: RoleTag,
    #[serde(rename = "match", default)]
    pub pattern: String,
    pub reply: String,
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn new(role_tag: RoleTag, pattern: &str, reply: &str) -> Self {
        Self {
            role_tag,
            pattern: pattern.into(),
            reply: reply.into(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// Deterministic backend that answers from an ordered script.
///
/// Replies may use `{key}` placeholders filled from the request metadata, plus
/// `{last_patient}`: the last `Patient:` line of the final message.
#[derive(Debug)]
pub struct ScriptedProvider {
    id: String,
    entries: Vec<ScriptEntry>,
    consumed: Mutex<Vec<bool>>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let n = entries.len();
        Self {
            id: "scripted".into(),
            entries,
            consumed: Mutex::new(vec![false; n]),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Parse a script document: a JSON array of entries.
    pub fn from_json(document: &str) -> Result<Self, ProviderError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(document).map_err(|e| ProviderError::Config(format!("bad script: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, ProviderError> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&doc)
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    /// Fresh copy with the cursor reset.
    pub fn reset_clone(&self) -> Self {
        Self::new(self.entries.clone()).with_id(self.id.clone())
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let haystack = request.haystack();
        let reply = {
            let mut consumed = self.consumed.lock().expect("script cursor poisoned");
            let hit = self.entries.iter().enumerate().find(|(i, e)| {
                e.role_tag == request.role_tag && !consumed[*i] && haystack.contains(&e.pattern)
            });
            match hit {
                Some((i, e)) => {
                    if !e.repeat {
                        consumed[i] = true;
                    }
                    e.reply.clone()
                }
                None => return Err(ProviderError::ScriptExhausted(request.role_tag)),
            }
        };
        let mut vars = request.metadata.clone();
        vars.insert("last_patient".into(), last_patient_line(request));
        Ok(ChatResponse {
            text: fill_placeholders(&reply, &vars),
            provider_id: self.id.clone(),
            latency: Duration::ZERO,
            degraded: false,
        })
    }
}

fn last_patient_line(request: &ChatRequest) -> String {
    let Some(last) = request.messages.iter().rev().find(|m| m.speaker == ChatRole::User) else {
        return String::new();
    };
    last.text
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Patient: "))
        .unwrap_or(&last.text)
        .trim()
        .to_string()
}
