//! Active-listening replies: prompt construction, output validation and the
//! scripted fallback path.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{CompletionClient, CompletionRequest, SPEAKER_MARKER};

pub const MAX_WORDS: usize = 97;

/// Instruction block sent ahead of every utterance.
pub const ACTIVE_LISTENING_PROMPT: &str = "Active Listening is a complex skill that involves multiple components:
\u{2022} Refraining from judgment and paraphrasing the speaker\u{2019}s message.
\u{2022} Reflecting back feelings and contents.
\u{2022} Demonstrating a sense of validation.
\u{2022} Unconditional acceptance and unbiased reflection of a client\u{2019}s experience
You are engaging in a conversation with a human. Respond in an active listening manner to the following using on average 28 words and a maximum of 97 words. Do not ask any question.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ListenerError {
    #[error("utterance is empty")]
    EmptyUtterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSource {
    Llm,
    ScriptedFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerResponse {
    pub text: String,
    pub word_count: usize,
    pub source: ResponseSource,
    pub question_index: usize,
}

/// One completed exchange, used as prompt history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub listener: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ListenerConfig {
    pub timeout_ms: u64,
    pub temperature: f64,
    /// Most recent turns included in the prompt.
    pub history_turns: usize,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 10_000,
            temperature: 0.7,
            history_turns: 3,
        }
    }
}

pub fn build_prompt(utterance: &str, history: &[Turn], history_turns: usize) -> Result<String, ListenerError> {
    if utterance.trim().is_empty() {
        return Err(ListenerError::EmptyUtterance);
    }
    let mut prompt = String::from(ACTIVE_LISTENING_PROMPT);
    let recent = &history[history.len().saturating_sub(history_turns)..];
    if !recent.is_empty() {
        prompt.push_str("\n\nConversation so far:");
        for turn in recent {
            prompt.push_str("\nS: ");
            prompt.push_str(turn.speaker.trim());
            if let Some(reply) = &turn.listener {
                prompt.push_str("\nL: ");
                prompt.push_str(reply.trim());
            }
        }
    }
    prompt.push_str("\n\n");
    prompt.push_str(SPEAKER_MARKER);
    prompt.push_str(utterance.trim());
    Ok(prompt)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    OverLength { words: usize },
    ContainsQuestion,
}

/// Result of checking a candidate reply. `advisories` flags sentences that
/// read like questions without a question mark; they do not fail validation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
    pub advisories: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

const INTERROGATIVES: &[&str] = &["who", "what", "when", "where", "why", "how"];
const AUXILIARIES: &[&str] = &["do", "did", "are", "is", "can", "could", "would"];
const WH_FOLLOWERS: &[&str] = &[
    "do", "does", "did", "is", "are", "was", "were", "can", "could", "would", "will", "should", "have", "has",
    "you", "made", "makes", "happened",
];
const AUX_FOLLOWERS: &[&str] = &["you", "i", "we", "they", "he", "she", "it", "that", "this", "there", "your"];

fn looks_interrogative(sentence: &str) -> bool {
    let mut words = sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_lowercase());
    let (Some(first), Some(second)) = (words.next(), words.next()) else {
        return false;
    };
    (INTERROGATIVES.contains(&first.as_str()) && WH_FOLLOWERS.contains(&second.as_str()))
        || (AUXILIARIES.contains(&first.as_str()) && AUX_FOLLOWERS.contains(&second.as_str()))
}

pub fn validate_response(text: &str) -> Validation {
    let mut v = Validation::default();
    let words = word_count(text);
    if words > MAX_WORDS {
        v.violations.push(Violation::OverLength { words });
    }
    if text.contains('?') {
        v.violations.push(Violation::ContainsQuestion);
    }
    for sentence in text.split(['.', '!', '?', ';', '\n']) {
        if looks_interrogative(sentence) {
            v.advisories.push(sentence.trim().to_string());
        }
    }
    v
}

/// One neutral acknowledgment per question, used when the backend fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedFallbacks(pub Vec<String>);

impl Default for ScriptedFallbacks {
    fn default() -> Self {
        Self(
            [
                "Thank you for sharing that with me.",
                "That sounds like a day that would mean a lot to you.",
                "Thank you. It is interesting to hear who you would choose.",
                "Thank you for telling me what you would want to know.",
                "Thank you for trusting me with that memory.",
                "That sounds like something you can be proud of.",
                "Thank you for sharing what matters to you in a friendship.",
                "I understand. That item clearly holds meaning for you.",
                "Thank you for sharing something so personal with me.",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }
}

impl ScriptedFallbacks {
    /// `question_index` is 1-based; out-of-range indices clamp to the ends.
    pub fn get(&self, question_index: usize) -> &str {
        if self.0.is_empty() {
            return "Thank you for sharing that.";
        }
        let i = question_index.clamp(1, self.0.len()) - 1;
        &self.0[i]
    }
}

fn fallback(fallbacks: &ScriptedFallbacks, question_index: usize) -> ListenerResponse {
    let text = fallbacks.get(question_index).to_string();
    ListenerResponse {
        word_count: word_count(&text),
        text,
        source: ResponseSource::ScriptedFallback,
        question_index,
    }
}

/// Asks the backend for an active-listening reply. A reply failing
/// validation is retried once; any backend error, or a second invalid
/// reply, yields the scripted fallback for `question_index`.
pub fn generate_response(
    utterance: &str,
    history: &[Turn],
    client: &dyn CompletionClient,
    fallbacks: &ScriptedFallbacks,
    question_index: usize,
    cfg: &ListenerConfig,
) -> ListenerResponse {
    let Ok(prompt) = build_prompt(utterance, history, cfg.history_turns) else {
        return fallback(fallbacks, question_index);
    };
    let req = CompletionRequest::single(prompt, cfg.temperature, Duration::from_millis(cfg.timeout_ms));
    for _ in 0..2 {
        match client.complete(&req) {
            Ok(text) if validate_response(&text).is_ok() => {
                return ListenerResponse {
                    word_count: word_count(&text),
                    text,
                    source: ResponseSource::Llm,
                    question_index,
                };
            }
            Ok(_) => continue,
            Err(_) => break,
        }
    }
    fallback(fallbacks, question_index)
}
