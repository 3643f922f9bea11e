//! Session transcripts as JSON Lines: a header line, then one event per
//! line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backchannel::{BackchannelAct, Gesture, SentimentClass};
use crate::listener::{ListenerResponse, ResponseSource};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("transcript schema {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("transcript line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("transcript is empty")]
    MissingHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Control,
    Bc,
    BcAl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Control, Condition::Bc, Condition::BcAl];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Control => "control",
            Condition::Bc => "bc",
            Condition::BcAl => "bc_al",
        }
    }

    pub fn backchannels(self) -> bool {
        self != Condition::Control
    }

    pub fn active_listening(self) -> bool {
        self == Condition::BcAl
    }

    /// Ordered contrast code for the linear trend test.
    pub fn contrast_code(self) -> f64 {
        match self {
            Condition::Control => -1.0,
            Condition::Bc => 0.0,
            Condition::BcAl => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown condition {0:?} (expected control, bc or bc_al)")]
pub struct UnknownCondition(pub String);

impl FromStr for Condition {
    type Err = UnknownCondition;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "control" => Ok(Condition::Control),
            "bc" => Ok(Condition::Bc),
            "bc_al" => Ok(Condition::BcAl),
            _ => Err(UnknownCondition(s.to_string())),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub schema: u32,
    pub session_id: String,
    pub condition: Condition,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    QuestionAsked {
        index: usize,
        text: String,
    },
    UserUtterance {
        text: String,
        start: u64,
        end: u64,
    },
    Backchannel {
        verbal: String,
        gesture: Gesture,
        sentiment: SentimentClass,
    },
    Response {
        text: String,
        word_count: usize,
        source: ResponseSource,
        question_index: usize,
    },
    SessionEnded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub t: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl TranscriptEvent {
    pub fn backchannel(act: &BackchannelAct) -> Self {
        Self {
            t: act.time,
            kind: EventKind::Backchannel {
                verbal: act.verbal.clone(),
                gesture: act.gesture,
                sentiment: act.sentiment,
            },
        }
    }

    pub fn response(t: u64, r: &ListenerResponse) -> Self {
        Self {
            t,
            kind: EventKind::Response {
                text: r.text.clone(),
                word_count: r.word_count,
                source: r.source,
                question_index: r.question_index,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transcript events serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>, condition: Condition, created_at: impl Into<String>) -> Self {
        Self {
            header: TranscriptHeader {
                schema: SCHEMA_VERSION,
                session_id: session_id.into(),
                condition,
                created_at: created_at.into(),
            },
            events: Vec::new(),
        }
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    pub fn backchannels(&self) -> impl Iterator<Item = &TranscriptEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Backchannel { .. }))
    }

    pub fn responses(&self) -> impl Iterator<Item = &TranscriptEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Response { .. }))
    }

    /// Answers per question: the concatenated user utterances that follow
    /// each `QuestionAsked`.
    pub fn answers(&self) -> Vec<(usize, String, String)> {
        let mut out: Vec<(usize, String, String)> = Vec::new();
        for e in &self.events {
            match &e.kind {
                EventKind::QuestionAsked { index, text } => out.push((*index, text.clone(), String::new())),
                EventKind::UserUtterance { text, .. } => {
                    if let Some(last) = out.last_mut() {
                        if !last.2.is_empty() && !text.is_empty() {
                            last.2.push(' ');
                        }
                        last.2.push_str(text);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.events {
            out.push_str(&e.to_json());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, TranscriptError> {
        let mut lines = reader.lines().enumerate();
        let header_line = loop {
            match lines.next() {
                Some((_, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(TranscriptError::MissingHeader),
            }
        };
        let raw: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| TranscriptError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let found = raw.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(TranscriptError::SchemaVersionMismatch {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let header: TranscriptHeader = serde_json::from_value(raw).map_err(|e| TranscriptError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let mut events = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line).map_err(|e| TranscriptError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        Ok(Self { header, events })
    }
}

pub fn persist(transcript: &Transcript, path: &Path) -> Result<(), TranscriptError> {
    std::fs::write(path, transcript.to_jsonl())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Transcript, TranscriptError> {
    Transcript::from_jsonl(BufReader::new(File::open(path)?))
}

/// Appends events to a transcript file as they happen, flushing each line.
#[derive(Debug)]
pub struct TranscriptWriter {
    file: File,
}

impl TranscriptWriter {
    pub fn create(path: &Path, header: &TranscriptHeader) -> Result<Self, TranscriptError> {
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        serde_json::to_writer(&mut file, header).map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(Self { file })
    }

    pub fn append(&mut self, event: &TranscriptEvent) -> Result<(), TranscriptError> {
        let mut line = event.to_json();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}
