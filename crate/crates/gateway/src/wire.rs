//! JSON messages exchanged over the session WebSocket.

use rapport_core::session::Phase;
use rapport_core::transcript::{EventKind, TranscriptEvent};
use serde::{Deserialize, Serialize};

/// Longest audio frame accepted from a client.
pub const MAX_FRAME_MS: u64 = 100;
pub const WIRE_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Base64 of 16 kHz mono little-endian PCM16, at most 100 ms.
    Audio { pcm16_b64: String },
    Text { chunk: String },
    EndOfTurn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireKind {
    State { phase: Phase },
    Error { message: String },
    #[serde(untagged)]
    Event(EventKind),
}

/// One server message. Transcript events appear on the wire in transcript
/// order; `state` and `error` notices are not part of the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEvent {
    pub session_id: String,
    pub t: u64,
    #[serde(flatten)]
    pub kind: WireKind,
}

impl WireEvent {
    pub fn from_transcript(session_id: &str, e: &TranscriptEvent) -> Self {
        Self {
            session_id: session_id.to_string(),
            t: e.t,
            kind: WireKind::Event(e.kind.clone()),
        }
    }

    /// The transcript event this message mirrors, if any.
    pub fn transcript_event(&self) -> Option<TranscriptEvent> {
        match &self.kind {
            WireKind::Event(kind) => Some(TranscriptEvent {
                t: self.t,
                kind: kind.clone(),
            }),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire events serialize")
    }
}
