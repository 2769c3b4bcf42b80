//! Chat-completion client for the segmentation assistant.
//!
//! The wire format is the common `/chat/completions` JSON body. Transports are
//! pluggable so that tests replay scripted responses instead of touching the
//! network.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AssistantError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected HTTP status {status}: {body}")]
    BadStatus { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid assistant config: {0}")]
    Config(String),
}

impl AssistantError {
    /// Whether the request is worth repeating.
    pub fn is_transport(&self) -> bool {
        matches!(self, AssistantError::Timeout | AssistantError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssistantConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        AssistantConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "vicuna-13b-v1.3".into(),
            timeout_secs: 60.0,
            max_in_flight: 4,
            token_env: "SPT_ASSISTANT_TOKEN".into(),
        }
    }
}

impl AssistantConfig {
    pub fn validate(&self) -> Result<(), AssistantError> {
        if !(self.timeout_secs > 0.0) {
            return Err(AssistantError::Config("timeout_secs must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(AssistantError::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: 0.0,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Extracts the first choice's text from a chat-completion response body.
pub fn parse_response(body: &str) -> Result<String, AssistantError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| AssistantError::Malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| AssistantError::Malformed("no choices".into()))
}

pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, AssistantError>;
}

pub struct HttpTransport {
    http: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &AssistantConfig) -> Result<Self, AssistantError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| AssistantError::Config(e.to_string()))?;
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        Ok(HttpTransport {
            http,
            url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            token,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, AssistantError> {
        let mut req = self.http.post(&self.url).json(request);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                AssistantError::Timeout
            } else {
                AssistantError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| AssistantError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(AssistantError::BadStatus {
                status: status.as_u16(),
                body,
            });
        }
        parse_response(&body)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MockReply {
    Text(String),
    Fail(AssistantError),
}

type Responder = Box<dyn Fn(&str) -> Result<String, AssistantError> + Send + Sync>;

/// Offline transport: replays replies keyed by prompt hash. Each key holds a
/// queue; the last reply of a queue repeats once the queue is drained.
pub struct MockTransport {
    script: Mutex<HashMap<String, VecDeque<MockReply>>>,
    fallback: Option<Responder>,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new() -> Self {
        MockTransport {
            script: Mutex::new(HashMap::new()),
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Answers every unscripted prompt with `f(prompt)`.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&str) -> Result<String, AssistantError> + Send + Sync + 'static,
    {
        MockTransport {
            fallback: Some(Box::new(f)),
            ..MockTransport::new()
        }
    }

    /// Loads a recorded `{prompt_hash: response_text}` map.
    pub fn recorded(map: HashMap<String, String>) -> Self {
        let script = map
            .into_iter()
            .map(|(k, v)| (k, VecDeque::from([MockReply::Text(v)])))
            .collect();
        MockTransport {
            script: Mutex::new(script),
            ..MockTransport::new()
        }
    }

    pub fn script(self, prompt: &str, replies: impl IntoIterator<Item = MockReply>) -> Self {
        self.script
            .lock()
            .expect("mock script poisoned")
            .insert(prompt_hash(prompt), replies.into_iter().collect());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, AssistantError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.prompt();
        let scripted = {
            let mut script = self.script.lock().expect("mock script poisoned");
            script.get_mut(&prompt_hash(prompt)).and_then(|q| {
                if q.len() > 1 {
                    q.pop_front()
                } else {
                    q.front().cloned()
                }
            })
        };
        match scripted {
            Some(MockReply::Text(t)) => Ok(t),
            Some(MockReply::Fail(e)) => Err(e),
            None => match &self.fallback {
                Some(f) => f(prompt),
                None => Err(AssistantError::Transport("no scripted reply".into())),
            },
        }
    }
}

/// Client used by the segmenter. Shareable across threads.
pub struct AssistantClient {
    transport: Box<dyn ChatTransport>,
    model: String,
    max_in_flight: usize,
}

impl AssistantClient {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>, max_in_flight: usize) -> Self {
        AssistantClient {
            transport,
            model: model.into(),
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn http(cfg: &AssistantConfig) -> Result<Self, AssistantError> {
        Ok(Self::new(
            Box::new(HttpTransport::new(cfg)?),
            cfg.model_name.clone(),
            cfg.max_in_flight,
        ))
    }

    pub fn mock(mock: MockTransport) -> Self {
        Self::new(Box::new(mock), "mock", 4)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Sends `prompt` as a single user message; retries once on a
    /// transport-level failure.
    pub fn complete(&self, prompt: &str) -> Result<String, AssistantError> {
        let request = ChatRequest::user(&self.model, prompt);
        match self.transport.send(&request) {
            Err(e) if e.is_transport() => {
                tracing::debug!(error = %e, "assistant request failed, retrying once");
                self.transport.send(&request)
            }
            other => other,
        }
    }
}
