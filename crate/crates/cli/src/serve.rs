//! Line-delimited JSON inference service: one session per connection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use base64::Engine;
use log::{info, warn};
use nalgebra::{Vector2, Vector3};
use reach_intent::abc::{GridSpec, InferenceGrid};
use reach_intent::scene::Scene;
use reach_intent::session::{Session, SessionConfig};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello { proto: u32 },
    Scene(Scene),
    Hand { t: f64, p: [f64; 3] },
    Gaze { t: f64, p: [f64; 2] },
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ready {
        grid: GridSpec,
        scene: Scene,
    },
    Posterior {
        t: f64,
        /// Base64 of one byte per cell, row-major, scaled so the maximum is 255.
        weights_u8: String,
    },
    Decision {
        object_probs: BTreeMap<u32, f64>,
        safe_object: Option<u32>,
        latency_ms: f64,
    },
    Error {
        code: String,
        message: String,
    },
}

/// Read-only state shared by all connections.
pub struct Shared {
    pub grid: Arc<InferenceGrid>,
    pub scene: Scene,
    pub config: SessionConfig,
}

/// Accepts connections until the listener fails, one thread per connection.
pub fn serve(listener: TcpListener, shared: Arc<Shared>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle(stream, &shared) {
                warn!("connection {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

fn send(out: &mut impl Write, msg: &ServerMessage) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, msg)?;
    out.write_all(b"\n")?;
    out.flush()
}

fn error(code: &str, message: impl Into<String>) -> ServerMessage {
    ServerMessage::Error {
        code: code.into(),
        message: message.into(),
    }
}

/// Runs one session over `stream`. Protocol violations are answered with an
/// error message, after which the connection is closed.
pub fn handle(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut out = BufWriter::new(stream);
    let mut session: Option<Session> = None;
    for line in reader.lines() {
        let line = line?;
        let received = Instant::now();
        if line.trim().is_empty() {
            continue;
        }
        let msg: ClientMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => return send(&mut out, &error("bad_message", e.to_string())),
        };
        let Some(active) = session.as_mut() else {
            match msg {
                ClientMessage::Hello { proto } if proto == PROTOCOL_VERSION => {
                    let s = Session::new(Arc::clone(&shared.grid), shared.scene.clone(), shared.config)
                        .map_err(std::io::Error::other)?;
                    send(
                        &mut out,
                        &ServerMessage::Ready {
                            grid: shared.grid.spec,
                            scene: s.scene().clone(),
                        },
                    )?;
                    session = Some(s);
                    info!("session opened");
                    continue;
                }
                ClientMessage::Hello { proto } => {
                    return send(
                        &mut out,
                        &error(
                            "version_mismatch",
                            format!("server speaks protocol {PROTOCOL_VERSION}, client sent {proto}"),
                        ),
                    );
                }
                _ => return send(&mut out, &error("expected_hello", "the first message must be hello")),
            }
        };
        match msg {
            ClientMessage::Hello { .. } => return send(&mut out, &error("unexpected_hello", "session already open")),
            ClientMessage::Scene(scene) => {
                if let Err(e) = active.set_scene(scene) {
                    return send(&mut out, &error("bad_scene", e.to_string()));
                }
            }
            ClientMessage::Reset => active.reset(),
            ClientMessage::Gaze { t, p } => {
                if let Err(e) = active.push_gaze(t, Vector2::from(p)) {
                    return send(&mut out, &error("bad_sample", e.to_string()));
                }
            }
            ClientMessage::Hand { t, p } => {
                let update = match active.push_hand(t, Vector3::from(p)) {
                    Ok(u) => u,
                    Err(e) => return send(&mut out, &error("bad_sample", e.to_string())),
                };
                let weights_u8 = base64::engine::general_purpose::STANDARD.encode(update.posterior.quantize_u8());
                send(&mut out, &ServerMessage::Posterior { t, weights_u8 })?;
                send(
                    &mut out,
                    &ServerMessage::Decision {
                        object_probs: update.object_probs,
                        safe_object: update.safe_object,
                        latency_ms: received.elapsed().as_secs_f64() * 1e3,
                    },
                )?;
            }
        }
    }
    Ok(())
}
