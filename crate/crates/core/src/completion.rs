//! Chat-completion backends shared by the sentiment, listener and disclosure
//! modules.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Budget for the whole call, retries included.
    pub timeout: Duration,
}

impl CompletionRequest {
    pub fn single(prompt: impl Into<String>, temperature: f64, timeout: Duration) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            temperature,
            timeout,
        }
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompletionError {
    #[error("completion timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("reply blocked by the provider's content filter")]
    ContentFiltered,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion reply: {0}")]
    Malformed(String),
    #[error("backend not configured: {0}")]
    Unconfigured(String),
}

pub trait CompletionClient: Send + Sync {
    /// Returns the assistant text. Implementations must return within
    /// `req.timeout`.
    fn complete(&self, req: &CompletionRequest) -> Result<String, CompletionError>;
}

impl<T: CompletionClient + ?Sized> CompletionClient for std::sync::Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, CompletionError> {
        (**self).complete(req)
    }
}

impl<T: CompletionClient + ?Sized> CompletionClient for &T {
    fn complete(&self, req: &CompletionRequest) -> Result<String, CompletionError> {
        (**self).complete(req)
    }
}

/// Marker that precedes the speaker's utterance in listener prompts.
pub const SPEAKER_MARKER: &str = "Speaker: ";

/// Deterministic paraphrase used by the mock backend:
/// `It sounds like you {clause}, and that is meaningful to you.`
pub fn echo_paraphrase(utterance: &str) -> String {
    let trimmed = utterance
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .replace('?', "");
    let starts_with_i = trimmed
        .split_whitespace()
        .next()
        .is_some_and(|w| w.eq_ignore_ascii_case("i"));
    let mut words: Vec<String> = Vec::new();
    if !starts_with_i && !trimmed.is_empty() {
        words.push("are saying".into());
    }
    for (i, raw) in trimmed.split_whitespace().enumerate() {
        let lower = raw.to_lowercase();
        let swapped = match lower.as_str() {
            "i" if i == 0 => continue,
            "i" => "you",
            "i'm" => "you're",
            "i've" => "you've",
            "i'd" => "you'd",
            "i'll" => "you'll",
            "my" => "your",
            "me" => "you",
            "mine" => "yours",
            "myself" => "yourself",
            "am" => "are",
            "we" => "you",
            "our" => "your",
            "us" => "you",
            _ => raw,
        };
        let word = if i == 0 {
            let mut c = swapped.chars();
            match c.next() {
                Some(first) => first.to_lowercase().chain(c).collect(),
                None => String::new(),
            }
        } else {
            swapped.to_string()
        };
        words.push(word);
    }
    let clause = if words.is_empty() {
        "shared something".to_string()
    } else {
        words.join(" ")
    };
    format!("It sounds like you {clause}, and that is meaningful to you.")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockBehavior {
    /// Paraphrases the text after the last speaker marker.
    EchoParaphrase,
    Reply(String),
    /// A 120-word reply without questions.
    OverLength,
    /// A reply that asks a question.
    Question,
    Fail(CompletionError),
    /// Sleeps for the request timeout, then reports a timeout.
    Stall,
}

/// Scripted backend for tests and offline runs. Behaviors are consumed in
/// order; once the script is empty the default applies.
#[derive(Debug)]
pub struct MockCompletionClient {
    script: Mutex<VecDeque<MockBehavior>>,
    default: MockBehavior,
    calls: AtomicUsize,
}

impl Default for MockCompletionClient {
    fn default() -> Self {
        Self::new(MockBehavior::EchoParaphrase)
    }
}

impl MockCompletionClient {
    pub fn new(default: MockBehavior) -> Self {
        Self {
            script: Mutex::new(VecDeque::new()),
            default,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn scripted(script: impl IntoIterator<Item = MockBehavior>, default: MockBehavior) -> Self {
        let client = Self::new(default);
        client.script.lock().unwrap().extend(script);
        client
    }

    pub fn push(&self, behavior: MockBehavior) {
        self.script.lock().unwrap().push_back(behavior);
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionClient for MockCompletionClient {
    fn complete(&self, req: &CompletionRequest) -> Result<String, CompletionError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let behavior = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| self.default.clone());
        match behavior {
            MockBehavior::EchoParaphrase => {
                let content = req.last_user_content();
                let utterance = content
                    .rfind(SPEAKER_MARKER)
                    .map(|i| &content[i + SPEAKER_MARKER.len()..])
                    .unwrap_or(content);
                Ok(echo_paraphrase(utterance))
            }
            MockBehavior::Reply(text) => Ok(text),
            MockBehavior::OverLength => Ok(vec!["listening"; 120].join(" ")),
            MockBehavior::Question => Ok("That sounds important. What happened next?".into()),
            MockBehavior::Fail(e) => Err(e),
            MockBehavior::Stall => {
                std::thread::sleep(req.timeout);
                Err(CompletionError::Timeout)
            }
        }
    }
}

#[cfg(feature = "http")]
pub use http::{HttpCompletionClient, HttpConfig};

#[cfg(feature = "http")]
mod http {
    use std::time::{Duration, Instant};

    use serde::{Deserialize, Serialize};
    use serde_json::Value;

    use super::{ChatMessage, CompletionClient, CompletionError, CompletionRequest};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct HttpConfig {
        /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
        pub base_url: String,
        pub model: String,
        /// Environment variable holding the bearer token.
        pub api_key_env: String,
        /// Log request and response bodies at debug level.
        pub debug: bool,
    }

    impl Default for HttpConfig {
        fn default() -> Self {
            Self {
                base_url: "https://api.openai.com/v1".into(),
                model: "gpt-4o".into(),
                api_key_env: "OPENAI_API_KEY".into(),
                debug: false,
            }
        }
    }

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a str,
        messages: &'a [ChatMessage],
        temperature: f64,
    }

    /// Blocking chat-completion client with at most one retry, both attempts
    /// sharing the request's timeout.
    #[derive(Debug)]
    pub struct HttpCompletionClient {
        cfg: HttpConfig,
        token: Option<String>,
        agent: ureq::Agent,
    }

    impl HttpCompletionClient {
        pub fn new(cfg: HttpConfig) -> Self {
            let token = std::env::var(&cfg.api_key_env).ok().filter(|t| !t.is_empty());
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .build()
                .into();
            Self { cfg, token, agent }
        }

        pub fn with_token(mut self, token: Option<String>) -> Self {
            self.token = token;
            self
        }

        fn endpoint(&self) -> String {
            format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
        }

        fn attempt(&self, body: &str, budget: Duration) -> Result<String, CompletionError> {
            let mut request = self
                .agent
                .post(&self.endpoint())
                .config()
                .timeout_global(Some(budget))
                .build()
                .header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            let mut response = request.send(body).map_err(|e| match e {
                ureq::Error::Timeout(_) => CompletionError::Timeout,
                other => CompletionError::Network(other.to_string()),
            })?;
            let status = response.status().as_u16();
            let text = response
                .body_mut()
                .read_to_string()
                .map_err(|e| match e {
                    ureq::Error::Timeout(_) => CompletionError::Timeout,
                    other => CompletionError::Network(other.to_string()),
                })?;
            if self.cfg.debug {
                log::debug!("completion response {status}: {text}");
            }
            parse_reply(status, &text)
        }
    }

    pub(super) fn parse_reply(status: u16, text: &str) -> Result<String, CompletionError> {
        let json: Option<Value> = serde_json::from_str(text).ok();
        if status != 200 {
            let code = json
                .as_ref()
                .and_then(|v| v.pointer("/error/code"))
                .and_then(Value::as_str)
                .unwrap_or("");
            if code == "content_filter" || code == "content_policy_violation" {
                return Err(CompletionError::ContentFiltered);
            }
            return Err(CompletionError::Status {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        let json = json.ok_or_else(|| CompletionError::Malformed("body is not JSON".into()))?;
        let choice = json
            .pointer("/choices/0")
            .ok_or_else(|| CompletionError::Malformed("no choices".into()))?;
        if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
            return Err(CompletionError::ContentFiltered);
        }
        choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| CompletionError::Malformed("no message content".into()))
    }

    fn retryable(e: &CompletionError) -> bool {
        match e {
            CompletionError::Network(_) => true,
            CompletionError::Status { status, .. } => matches!(status, 408 | 429 | 500 | 502 | 503 | 504),
            _ => false,
        }
    }

    impl CompletionClient for HttpCompletionClient {
        fn complete(&self, req: &CompletionRequest) -> Result<String, CompletionError> {
            let body = serde_json::to_string(&Body {
                model: &self.cfg.model,
                messages: &req.messages,
                temperature: req.temperature,
            })
            .map_err(|e| CompletionError::Malformed(e.to_string()))?;
            if self.cfg.debug {
                log::debug!("completion request to {}: {body}", self.endpoint());
            }
            let deadline = Instant::now() + req.timeout;
            let first = self.attempt(&body, req.timeout);
            match first {
                Err(e) if retryable(&e) => {
                    let left = deadline.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(CompletionError::Timeout);
                    }
                    self.attempt(&body, left)
                }
                other => other,
            }
        }
    }
}
