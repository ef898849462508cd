use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{ChatProvider, ChatRequest, ChatResponse, ChatRole, ProviderConfig, ProviderError};

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Debug, Deserialize)]
struct WireContent {
    content: String,
}

/// Client for a local `/v1/chat/completions` endpoint.
///
/// Failures are retried with exponential backoff; after the last retry the
/// response is degraded to the request's fallback text.
pub struct HttpChatProvider {
    config: ProviderConfig,
    id: String,
    // built lazily: a blocking client must not be created on an async thread
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl HttpChatProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let id = format!("http:{}", config.model_name);
        Ok(Self {
            config,
            id,
            client: OnceLock::new(),
        })
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.endpoint_url.trim_end_matches('/'))
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, ProviderError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(self.config.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| ProviderError::Transport(e.clone()))
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        messages.push(WireMessage {
            role: "system",
            content: &request.system_prompt,
        });
        for m in &request.messages {
            messages.push(WireMessage {
                role: match m.speaker {
                    ChatRole::User => "user",
                    ChatRole::Assistant => "assistant",
                },
                content: &m.text,
            });
        }
        let body = WireRequest {
            model: &self.config.model_name,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let resp = self
            .client()?
            .post(self.url())
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ProviderError::Transport(format!("status {}", resp.status())));
        }
        let parsed: WireResponse = resp.json().map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProviderError::BadResponse("no choices".into()))
    }
}

impl ChatProvider for HttpChatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let started = Instant::now();
        let mut backoff = self.config.backoff_base;
        for attempt in 0..=self.config.retries {
            match self.attempt(request) {
                Ok(text) => {
                    return Ok(ChatResponse {
                        text: text.trim().to_string(),
                        provider_id: self.id.clone(),
                        latency: started.elapsed(),
                        degraded: false,
                    })
                }
                Err(e) => {
                    debug!(attempt, error = %e, "chat completion attempt failed");
                    if attempt < self.config.retries {
                        std::thread::sleep(backoff);
                        backoff = backoff.saturating_mul(2).min(Duration::from_secs(30));
                    } else {
                        warn!(provider = %self.id, error = %e, "chat completion failed after retries");
                    }
                }
            }
        }
        Ok(ChatResponse::degraded(request, &self.id, started.elapsed()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ChatMessage, RoleTag};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Single-connection HTTP server returning `body`; hands back the request body.
    fn one_shot_server(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut first = String::new();
            reader.read_line(&mut first).unwrap();
            assert!(first.starts_with("POST /v1/chat/completions "), "{first}");
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}"), h)
    }

    #[test]
    fn posts_chat_completion_shape() {
        let (url, h) = one_shot_server(r#"{"choices":[{"message":{"role":"assistant","content":" Any headache? "}}]}"#);
        let p = HttpChatProvider::new(ProviderConfig::http(url, "local-model")).unwrap();
        let mut req = ChatRequest::new(RoleTag::QuestionLlm, "sys".into(), vec![ChatMessage::user("hello")]);
        req.seed = Some(9);
        let r = p.complete(&req).unwrap();
        assert_eq!(r.text, "Any headache?");
        assert!(!r.degraded);
        let sent: serde_json::Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({
                "model": "local-model",
                "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "hello"}],
                "temperature": 0.7,
                "max_tokens": 128,
                "seed": 9
            })
        );
    }

    #[test]
    fn unreachable_endpoint_degrades() {
        // bind then drop to get a port nothing listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = ProviderConfig::http(format!("http://127.0.0.1:{port}"), "m");
        cfg.retries = 1;
        cfg.backoff_base = Duration::from_millis(1);
        cfg.timeout = Duration::from_millis(500);
        let p = HttpChatProvider::new(cfg).unwrap();
        let mut req = ChatRequest::new(RoleTag::QuestionLlm, "s".into(), vec![ChatMessage::user("x")]);
        req.fallback = "Do you have nausea?".into();
        let r = p.complete(&req).unwrap();
        assert!(r.degraded);
        assert_eq!(r.text, "Do you have nausea?");
    }
}
