#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use rapport_core::session::Input;
use rapport_gateway::wire::WireEvent;
use rapport_gateway::{AppState, Backends, GatewayConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub struct Server {
    pub addr: SocketAddr,
    pub dir: tempfile::TempDir,
    pub http: reqwest::Client,
}

pub async fn start(tweak: impl FnOnce(&mut GatewayConfig)) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = GatewayConfig {
        data_dir: dir.path().to_path_buf(),
        ..GatewayConfig::default()
    };
    tweak(&mut cfg);
    let backends = Backends::from_config(&cfg);
    let state: Arc<AppState> = AppState::new(cfg, backends).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(rapport_gateway::serve(listener, state));
    Server {
        addr,
        dir,
        http: reqwest::Client::new(),
    }
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub async fn create(&self, condition: &str) -> (reqwest::StatusCode, Value) {
        let r = self
            .http
            .post(self.url("/sessions"))
            .json(&json!({ "condition": condition }))
            .send()
            .await
            .unwrap();
        let status = r.status();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn new_session(&self, condition: &str) -> (String, Ws) {
        let (status, body) = self.create(condition).await;
        assert_eq!(status, 201, "{body}");
        let id = body["session_id"].as_str().unwrap().to_string();
        let url = body["ws_url"].as_str().unwrap().to_string();
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        (id, ws)
    }

    pub async fn transcript(&self, id: &str) -> (reqwest::StatusCode, String) {
        let r = self.http.get(self.url(&format!("/sessions/{id}/transcript"))).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }
}

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

#[derive(Debug)]
pub enum Received {
    Event(WireEvent),
    Closed(Option<CloseCode>, String),
}

pub async fn recv(ws: &mut Ws) -> Received {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server went quiet");
        match msg {
            Some(Ok(Message::Text(t))) => return Received::Event(serde_json::from_str(t.as_str()).unwrap()),
            Some(Ok(Message::Close(frame))) => {
                return Received::Closed(frame.as_ref().map(|f| f.code), frame.map(|f| f.reason.to_string()).unwrap_or_default())
            }
            Some(Ok(_)) => continue,
            None | Some(Err(_)) => return Received::Closed(None, String::new()),
        }
    }
}

pub async fn recv_event(ws: &mut Ws) -> WireEvent {
    match recv(ws).await {
        Received::Event(e) => e,
        other => panic!("expected an event, got {other:?}"),
    }
}

pub async fn send_json(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

pub fn to_wire(input: &Input) -> Value {
    match input {
        Input::Text { chunk, .. } => json!({ "type": "text", "chunk": chunk }),
        Input::EndOfTurn { .. } => json!({ "type": "end_of_turn" }),
        Input::Audio(frame) => json!({
            "type": "audio",
            "pcm16_b64": base64::engine::general_purpose::STANDARD.encode(frame.to_pcm16_le()),
        }),
    }
}

/// The recorded fixture stream split into one group of inputs per answer.
pub fn answers(seed: u64) -> Vec<Vec<Input>> {
    let mut groups: Vec<Vec<Input>> = Vec::new();
    for input in rapport_core::fixtures::recorded_inputs(seed) {
        if matches!(input, Input::Text { .. }) {
            groups.push(Vec::new());
        }
        groups.last_mut().unwrap().push(input);
    }
    groups
}
