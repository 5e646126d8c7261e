//! Websocket bridge for human teleoperation. One session at a time; every
//! finished session is stored as a regular episode file.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::arm::{JointConfig, JointDelta, NUM_JOINTS};
use crate::dataset::{episode_path, write_episode, Episode, EpisodeMeta, FORMAT_VERSION};
use crate::expert::GRIP_RAMP_STEP;
use crate::render::Frame;
use crate::rollout::judge_episode;
use crate::scene::{make_training_scene, Side};
use crate::sim::World;

struct Active {
    world: World,
    frames: Vec<Frame>,
    joints: Vec<JointConfig>,
}

/// Protocol state for one connection, independent of the transport.
pub struct TeleopSession {
    out_dir: PathBuf,
    active: Option<Active>,
}

fn error(msg: impl Into<String>) -> Value {
    json!({"type": "error", "msg": msg.into()})
}

impl TeleopSession {
    pub fn new(out_dir: &Path) -> Self {
        TeleopSession {
            out_dir: out_dir.to_path_buf(),
            active: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    /// Replies to one client text message, in order.
    pub fn handle(&mut self, text: &str) -> Vec<Value> {
        let msg: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return vec![error(format!("malformed message: {e}"))],
        };
        match msg.get("type").and_then(Value::as_str) {
            Some("start") => self.start(&msg),
            Some("delta") => self.delta(&msg),
            Some("grip") => self.grip(&msg),
            Some("stop") => vec![self.stop()],
            Some(other) => vec![error(format!("unknown message type {other:?}"))],
            None => vec![error("missing message type")],
        }
    }

    fn start(&mut self, msg: &Value) -> Vec<Value> {
        if self.active.is_some() {
            return vec![error("session already started")];
        }
        let side = match msg.get("side").and_then(Value::as_str).map(str::parse::<Side>) {
            Some(Ok(s)) => s,
            _ => return vec![error("start needs side \"left\" or \"right\"")],
        };
        let Some(seed) = msg.get("seed").and_then(Value::as_u64) else {
            return vec![error("start needs a non-negative integer seed")];
        };
        let scene = match make_training_scene(side, seed) {
            Ok(s) => s,
            Err(e) => return vec![error(e.to_string())],
        };
        let world = World::new(&scene);
        let q = JointConfig::HOME;
        let frame = match world.observe(&q) {
            Ok(f) => f,
            Err(e) => return vec![error(e.to_string())],
        };
        self.active = Some(Active {
            world,
            frames: vec![frame],
            joints: vec![q],
        });
        vec![self.observation()]
    }

    fn delta(&mut self, msg: &Value) -> Vec<Value> {
        if self.active.is_none() {
            return vec![error("no active session")];
        }
        let dq = match msg.get("dq").and_then(Value::as_array) {
            Some(a) if a.len() == NUM_JOINTS => {
                let vals: Option<Vec<f64>> = a.iter().map(Value::as_f64).collect();
                match vals {
                    Some(v) if v.iter().all(|x| x.is_finite()) => v,
                    _ => return vec![error("dq must hold finite numbers")],
                }
            }
            _ => return vec![error("dq must be an array of 6 numbers")],
        };
        let mut d = [0.0; NUM_JOINTS];
        d.copy_from_slice(&dq);
        match self.apply(JointDelta(d)) {
            Ok(()) => vec![self.observation()],
            Err(e) => vec![error(e)],
        }
    }

    /// Ramps the gripper to fully closed (0) or open (1) in steps of
    /// [`GRIP_RAMP_STEP`], reporting an observation after each.
    fn grip(&mut self, msg: &Value) -> Vec<Value> {
        if self.active.is_none() {
            return vec![error("no active session")];
        }
        let target = match msg.get("value").and_then(Value::as_u64) {
            Some(0) => 0.0,
            Some(1) => 1.0,
            _ => return vec![error("grip value must be 0 or 1")],
        };
        let mut out = Vec::new();
        loop {
            let g = self.current().gripper();
            if g == target {
                break;
            }
            let mut d = [0.0; NUM_JOINTS];
            d[5] = (target - g).clamp(-GRIP_RAMP_STEP, GRIP_RAMP_STEP);
            if let Err(e) = self.apply(JointDelta(d)) {
                out.push(error(e));
                break;
            }
            out.push(self.observation());
        }
        out
    }

    fn stop(&mut self) -> Value {
        let Some(active) = self.active.take() else {
            return error("no active session");
        };
        let scene = active.world.scene;
        let ep = Episode {
            frames: active.frames,
            joints: active.joints,
            meta: EpisodeMeta {
                scene,
                expert_seed: 0,
                format_version: FORMAT_VERSION,
            },
        };
        let verdict = judge_episode(&ep);
        let saved = if ep.len() >= 2 {
            match self.save(&ep) {
                Ok(p) => Some(p.display().to_string()),
                Err(e) => return error(format!("could not save episode: {e}")),
            }
        } else {
            None
        };
        json!({
            "type": "verdict",
            "success": verdict.success,
            "reason": verdict.reason.map(|r| r.to_string()),
            "frames": ep.len(),
            "episode": saved,
        })
    }

    /// Ends the session as if the client had sent `stop`.
    pub fn finish(&mut self) -> Option<Value> {
        self.active.is_some().then(|| self.stop())
    }

    fn save(&self, ep: &Episode) -> io::Result<PathBuf> {
        std::fs::create_dir_all(self.out_dir.join("pool"))?;
        let mut id = 0;
        while episode_path(&self.out_dir, id).exists() {
            id += 1;
        }
        let path = episode_path(&self.out_dir, id);
        write_episode(ep, &path).map_err(io::Error::other)?;
        Ok(path)
    }

    fn current(&self) -> JointConfig {
        *self.active.as_ref().expect("active session").joints.last().expect("non-empty")
    }

    fn apply(&mut self, dq: JointDelta) -> Result<(), String> {
        let a = self.active.as_mut().expect("active session");
        let q = *a.joints.last().expect("non-empty");
        let next = a.world.step(&q, &dq).map_err(|e| e.to_string())?;
        let frame = a.world.observe(&next).map_err(|e| e.to_string())?;
        a.frames.push(frame);
        a.joints.push(next);
        Ok(())
    }

    fn observation(&self) -> Value {
        let a = self.active.as_ref().expect("active session");
        json!({
            "type": "obs",
            "frame_b64": B64.encode(a.frames.last().expect("non-empty").as_bytes()),
            "joints": a.joints.last().expect("non-empty").0,
            "t": a.frames.len() - 1,
        })
    }
}

pub struct TeleopServer {
    listener: TcpListener,
    out_dir: PathBuf,
    busy: Arc<AtomicBool>,
}

impl TeleopServer {
    pub fn bind(addr: impl ToSocketAddrs, out_dir: &Path) -> io::Result<Self> {
        Ok(TeleopServer {
            listener: TcpListener::bind(addr)?,
            out_dir: out_dir.to_path_buf(),
            busy: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn serve(&self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let busy = Arc::clone(&self.busy);
            let out_dir = self.out_dir.clone();
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &out_dir, &busy) {
                    log::warn!("teleop connection ended: {e}");
                }
            });
        }
        Ok(())
    }
}

fn send(ws: &mut WebSocket<TcpStream>, v: &Value) -> tungstenite::Result<()> {
    ws.send(Message::text(v.to_string()))
}

fn handle_connection(stream: TcpStream, out_dir: &Path, busy: &AtomicBool) -> Result<(), Box<dyn std::error::Error>> {
    let mut ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    if busy.swap(true, Ordering::SeqCst) {
        send(&mut ws, &json!({"type": "busy", "msg": "another session is active"}))?;
        ws.close(None)?;
        // Drain until the close handshake finishes.
        while ws.read().is_ok() {}
        return Ok(());
    }
    let mut session = TeleopSession::new(out_dir);
    let result = session_loop(&mut ws, &mut session);
    if let Some(v) = session.finish() {
        log::info!("session closed by disconnect: {v}");
    }
    busy.store(false, Ordering::SeqCst);
    result
}

fn session_loop(ws: &mut WebSocket<TcpStream>, session: &mut TeleopSession) -> Result<(), Box<dyn std::error::Error>> {
    loop {
        let msg = match ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(tungstenite::Error::Protocol(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match msg {
            Message::Text(t) => {
                for reply in session.handle(t.as_str()) {
                    send(ws, &reply)?;
                }
            }
            Message::Binary(_) => send(ws, &error("binary messages are not supported"))?,
            Message::Close(_) => return Ok(()),
            _ => {}
        }
    }
}
