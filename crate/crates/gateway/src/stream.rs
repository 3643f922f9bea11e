//! The per-connection loop: client messages and finished backend work are
//! applied to the session one at a time, and every new transcript event is
//! persisted and then sent, so the wire and the file stay in the same order.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{close_code, CloseFrame, Message, WebSocket};
use base64::Engine;
use rapport_core::backchannel::{classify_sentiment, SentimentResult};
use rapport_core::listener::{generate_response, ListenerResponse};
use rapport_core::prosody::AudioFrame;
use rapport_core::session::{Action, Input, Phase};
use rapport_core::transcript::EventKind;
use tokio::sync::mpsc;
use tokio::time::Instant;

use crate::wire::{ClientMessage, WireEvent, WireKind, MAX_FRAME_MS, WIRE_SAMPLE_RATE};
use crate::{mark_done, AppState, Live, SessionSlot};

/// A jump in wall time larger than this re-anchors the audio clock.
const AUDIO_GAP_MS: u64 = 500;

enum Work {
    Sentiment { request: u64, result: SentimentResult },
    Response(ListenerResponse),
}

enum Exit {
    Finished,
    ClientGone,
    Close(u16, String),
}

pub(crate) async fn run(mut socket: WebSocket, slot: Arc<SessionSlot>, state: Arc<AppState>) {
    let exit = match drive(&mut socket, &slot, &state).await {
        Ok(()) => Exit::Finished,
        Err(e) => e,
    };
    let frame = match exit {
        Exit::ClientGone => return,
        Exit::Finished => CloseFrame {
            code: close_code::NORMAL,
            reason: "session complete".into(),
        },
        Exit::Close(code, reason) => {
            log::warn!("session {}: closing stream: {reason}", slot.id);
            CloseFrame {
                code,
                reason: reason.into(),
            }
        }
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}

async fn send(socket: &mut WebSocket, e: &WireEvent) -> Result<(), Exit> {
    socket
        .send(Message::Text(e.to_json().into()))
        .await
        .map_err(|_| Exit::ClientGone)
}

async fn drive(socket: &mut WebSocket, slot: &Arc<SessionSlot>, state: &Arc<AppState>) -> Result<(), Exit> {
    let (work_tx, mut work_rx) = mpsc::unbounded_channel::<Work>();
    let idle = Duration::from_millis(state.cfg.idle_timeout_ms);

    // greet with the current question, then resume anything left in flight
    {
        let live = slot.live.lock().await;
        let current = live
            .session
            .transcript()
            .events
            .iter()
            .rev()
            .find(|e| matches!(e.kind, EventKind::QuestionAsked { .. }))
            .cloned();
        if let Some(q) = current {
            send(socket, &WireEvent::from_transcript(&slot.id, &q)).await?;
        }
        if let Some(action) = live.pending_response.clone() {
            spawn_work(&action, &live, state, &work_tx);
        }
    }

    let mut deadline = Instant::now() + idle;
    loop {
        tokio::select! {
            msg = socket.recv() => {
                deadline = Instant::now() + idle;
                let text = match msg {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return Err(Exit::ClientGone),
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Ping(_))) | Some(Ok(Message::Pong(_))) => continue,
                    Some(Ok(Message::Binary(_))) => {
                        return Err(Exit::Close(close_code::UNSUPPORTED, "binary frames are not accepted".into()))
                    }
                };
                let msg: ClientMessage = serde_json::from_str(text.as_str())
                    .map_err(|e| Exit::Close(close_code::PROTOCOL, format!("malformed message: {e}")))?;
                let input = {
                    let mut live = slot.live.lock().await;
                    to_input(msg, &mut live, slot.wall_ms()).map_err(|m| Exit::Close(close_code::PROTOCOL, m))?
                };
                step(socket, slot, state, &work_tx, |live| {
                    live.session.ingest(input).map_err(|e| e.to_string())
                })
                .await?;
            }
            Some(work) = work_rx.recv() => {
                step(socket, slot, state, &work_tx, |live| {
                    match work {
                        Work::Sentiment { request, result } => live.session.sentiment_ready(request, result),
                        Work::Response(response) => {
                            live.pending_response = None;
                            let now = live.session.clock().max(slot.wall_ms());
                            live.session.complete_response(response, now).map_err(|e| e.to_string())?;
                            return Ok(vec![Action::TurnComplete]);
                        }
                    }
                    Ok(Vec::new())
                })
                .await?;
            }
            _ = tokio::time::sleep_until(deadline) => {
                return Err(Exit::Close(close_code::AWAY, "idle timeout".into()));
            }
        }
    }
}

fn to_input(msg: ClientMessage, live: &mut Live, wall: u64) -> Result<Input, String> {
    let now = live.session.clock().max(wall);
    Ok(match msg {
        ClientMessage::Text { chunk } => Input::Text { chunk, t: now },
        ClientMessage::EndOfTurn => Input::EndOfTurn { t: now },
        ClientMessage::Audio { pcm16_b64 } => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(pcm16_b64.as_bytes())
                .map_err(|e| format!("audio is not base64: {e}"))?;
            if bytes.len() % 2 != 0 {
                return Err("audio byte length is odd".into());
            }
            let max_samples = (WIRE_SAMPLE_RATE as u64 * MAX_FRAME_MS / 1000) as usize;
            if bytes.len() / 2 > max_samples {
                return Err(format!("audio frame longer than {MAX_FRAME_MS} ms"));
            }
            let start = match live.audio_cursor {
                Some(c) if wall <= c + AUDIO_GAP_MS => c,
                _ => now,
            };
            let frame = AudioFrame::from_pcm16_le(&bytes, WIRE_SAMPLE_RATE, start);
            live.audio_cursor = Some(start + frame.duration_ms());
            Input::Audio(frame)
        }
    })
}

/// Applies one change to the session, performs the resulting actions, and
/// sends whatever the transcript gained.
async fn step(
    socket: &mut WebSocket,
    slot: &Arc<SessionSlot>,
    state: &Arc<AppState>,
    work_tx: &mpsc::UnboundedSender<Work>,
    change: impl FnOnce(&mut Live) -> Result<Vec<Action>, String>,
) -> Result<(), Exit> {
    let (fresh, phase_before, phase_after, clock, failure) = {
        let mut live = slot.live.lock().await;
        let before = live.session.phase();
        let mut failure = None;
        match change(&mut live) {
            Ok(actions) => {
                for action in &actions {
                    match action {
                        Action::TurnComplete => {
                            let now = live.session.clock().max(slot.wall_ms());
                            if let Err(e) = live.session.next_prompt(now) {
                                failure = Some(e.to_string());
                            }
                        }
                        Action::GenerateResponse { .. } => {
                            live.pending_response = Some(action.clone());
                            spawn_work(action, &live, state, work_tx);
                        }
                        Action::ClassifySentiment { .. } => spawn_work(action, &live, state, work_tx),
                        Action::Backchannel(_) => {}
                    }
                }
            }
            Err(e) => failure = Some(e),
        }
        let fresh = live
            .persist_new()
            .map_err(|e| Exit::Close(close_code::ERROR, format!("transcript write failed: {e}")))?;
        mark_done(slot, &live);
        (fresh, before, live.session.phase(), live.session.clock(), failure)
    };

    for e in &fresh {
        send(socket, &WireEvent::from_transcript(&slot.id, e)).await?;
    }
    if phase_after != phase_before {
        let notice = WireEvent {
            session_id: slot.id.clone(),
            t: clock,
            kind: WireKind::State { phase: phase_after },
        };
        send(socket, &notice).await?;
    }
    if let Some(message) = failure {
        let notice = WireEvent {
            session_id: slot.id.clone(),
            t: clock,
            kind: WireKind::Error { message },
        };
        send(socket, &notice).await?;
    }
    if phase_after == Phase::Done {
        return Err(Exit::Finished);
    }
    Ok(())
}

fn spawn_work(action: &Action, live: &Live, state: &Arc<AppState>, tx: &mpsc::UnboundedSender<Work>) {
    let tx = tx.clone();
    match action.clone() {
        Action::ClassifySentiment { request, text } => {
            let backend = state.backends.sentiment.clone();
            tokio::task::spawn_blocking(move || {
                // a failed classification keeps the previous class
                if let Ok(result) = classify_sentiment(&text, backend.as_ref()) {
                    let _ = tx.send(Work::Sentiment { request, result });
                }
            });
        }
        Action::GenerateResponse {
            utterance,
            history,
            question_index,
        } => {
            let client = state.backends.completion.clone();
            let cfg = live.session.config().listener;
            tokio::task::spawn_blocking(move || {
                let fallbacks = Default::default();
                let r = generate_response(&utterance, &history, client.as_ref(), &fallbacks, question_index, &cfg);
                let _ = tx.send(Work::Response(r));
            });
        }
        Action::Backchannel(_) | Action::TurnComplete => {}
    }
}
