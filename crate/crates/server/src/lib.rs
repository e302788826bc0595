//! Session server: static UI assets plus one websocket per live session.
//!
//! Every connection owns its own simulator. In teleop mode the client steers
//! with `target` messages and finished episodes are written in the same
//! format as scripted collection; in watch mode a trained policy drives and
//! its ticks are streamed at the control rate.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use prodapt_core::data::{episode_file_name, write_episode};
use prodapt_core::diffusion::Checkpoint;
use prodapt_core::eval::Variant;
use prodapt_core::keypoints::KeypointConfig;
use prodapt_core::seed::rng_for;
use prodapt_core::session::{scene_for, ClientMessage, ServerMessage, TeleopSession, TeleopStep, TICK_HZ};
use prodapt_core::sim2d::SimConfig;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("port {0} is already in use")]
    PortBusy(SocketAddr),
    #[error("watch mode needs a checkpoint")]
    MissingCheckpoint,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] prodapt_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Teleop,
    Watch,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teleop" => Ok(Mode::Teleop),
            "watch" => Ok(Mode::Watch),
            other => Err(format!("unknown mode '{other}' (expected teleop or watch)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub mode: Mode,
    /// Where teleop episodes are written.
    pub data_dir: PathBuf,
    /// Policy driven in watch mode.
    pub checkpoint: Option<PathBuf>,
    /// Built UI assets; a placeholder page is served when absent.
    pub static_dir: Option<PathBuf>,
    /// Base seed for watch-mode sampling when `start` carries none.
    pub seed: u64,
    pub tick_hz: f64,
}

impl ServerConfig {
    pub fn new(mode: Mode, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            data_dir: data_dir.into(),
            checkpoint: None,
            static_dir: None,
            seed: 0,
            tick_hz: TICK_HZ,
        }
    }
}

/// Shared, read-mostly server state.
pub struct AppState {
    cfg: ServerConfig,
    policy: Option<Arc<Variant>>,
    next_episode: AtomicUsize,
    sessions: AtomicU64,
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Result<Arc<Self>, ServerError> {
        let policy = match (&cfg.checkpoint, cfg.mode) {
            (Some(path), _) => {
                let ck = Checkpoint::load(path)?;
                Some(Arc::new(Variant::from_checkpoint("watch", &ck, None)?))
            }
            (None, Mode::Watch) => return Err(ServerError::MissingCheckpoint),
            (None, Mode::Teleop) => None,
        };
        if cfg.mode == Mode::Teleop {
            std::fs::create_dir_all(&cfg.data_dir).map_err(|source| ServerError::Io {
                context: format!("creating {}", cfg.data_dir.display()),
                source,
            })?;
        }
        let next = next_free_index(&cfg.data_dir);
        Ok(Arc::new(Self {
            cfg,
            policy,
            next_episode: AtomicUsize::new(next),
            sessions: AtomicU64::new(0),
        }))
    }

    fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.cfg.tick_hz)
    }
}

/// First episode index after any `episode_NNNN.jsonl` already in `dir`.
fn next_free_index(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("episode_")?.strip_suffix(".jsonl")?.parse::<usize>().ok()
        })
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

const PLACEHOLDER: &str = "<!doctype html>
<html><head><title>prodapt</title></head>
<body><h1>prodapt session server</h1>
<p>No UI assets were configured. Connect a websocket client to <code>/ws</code>.</p>
</body></html>
";

pub fn router(state: Arc<AppState>) -> Router {
    let app = Router::new().route("/ws", get(ws_handler));
    let app = match &state.cfg.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    app.with_state(state)
}

/// Binds `addr`, reporting an occupied port as [`ServerError::PortBusy`].
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| {
        if source.kind() == std::io::ErrorKind::AddrInUse {
            ServerError::PortBusy(addr)
        } else {
            ServerError::Io {
                context: format!("binding {addr}"),
                source,
            }
        }
    })
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> Result<(), ServerError> {
    axum::serve(listener, router(state)).await.map_err(|source| ServerError::Io {
        context: "serving".into(),
        source,
    })
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| async move {
        let id = state.sessions.fetch_add(1, Ordering::Relaxed);
        tracing::info!(session = id, "connected");
        match state.cfg.mode {
            Mode::Teleop => teleop_session(socket, &state).await,
            Mode::Watch => watch_session(socket, &state, id).await,
        }
        tracing::info!(session = id, "closed");
    })
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

fn error(message: impl Into<String>) -> ServerMessage {
    ServerMessage::Error {
        message: message.into(),
    }
}

/// Next client message; `None` when the connection is gone.
/// Malformed messages come back as `Some(Err(_))`.
async fn next_message(socket: &mut WebSocket) -> Option<Result<ClientMessage, String>> {
    loop {
        match socket.recv().await {
            None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return None,
            Some(Ok(Message::Text(text))) => {
                return Some(serde_json::from_str(text.as_str()).map_err(|e| format!("malformed message: {e}")))
            }
            Some(Ok(_)) => continue,
        }
    }
}

async fn teleop_session(mut socket: WebSocket, state: &AppState) {
    let mut episode: Option<TeleopSession> = None;
    let mut clock = tokio::time::interval(state.period());
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            msg = next_message(&mut socket) => {
                let reply = match msg {
                    // Disconnect: any partial demonstration is dropped with `episode`.
                    None => return,
                    Some(Err(e)) => Some(error(e)),
                    Some(Ok(ClientMessage::Start { setup, seed })) => {
                        let scene = scene_for(setup, seed);
                        let seed = if setup.is_none() { Some(seed.unwrap_or(0)) } else { None };
                        let session = TeleopSession::new(scene.clone(), seed, KeypointConfig::default(), SimConfig::default());
                        episode = Some(session);
                        clock.reset();
                        Some(ServerMessage::Scene { scene })
                    }
                    Some(Ok(ClientMessage::Target { x, y })) => match episode.as_mut() {
                        Some(s) => s.set_target(x, y).err().map(|e| error(e.to_string())),
                        None => Some(error("no episode running; send start first")),
                    },
                    Some(Ok(ClientMessage::Stop)) => episode.take().map(|s| ServerMessage::End {
                        success: false,
                        iterations: s.iterations(),
                    }),
                };
                if let Some(reply) = reply {
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
            }
            _ = clock.tick(), if episode.is_some() => {
                let step = episode.as_mut().expect("guarded").tick();
                let out = match step {
                    TeleopStep::Running(tick) => vec![tick],
                    TeleopStep::Finished { tick, end, demo } => {
                        episode = None;
                        let index = state.next_episode.fetch_add(1, Ordering::Relaxed);
                        let path = state.cfg.data_dir.join(episode_file_name(index));
                        match write_episode(&path, &demo) {
                            Ok(()) => {
                                tracing::info!(path = %path.display(), "episode written");
                                vec![tick, end]
                            }
                            Err(e) => vec![tick, error(e.to_string()), end],
                        }
                    }
                    TeleopStep::TimedOut { tick, end } => {
                        episode = None;
                        vec![tick, end]
                    }
                };
                for m in &out {
                    if !send(&mut socket, m).await {
                        return;
                    }
                }
            }
        }
    }
}

async fn watch_session(mut socket: WebSocket, state: &AppState, id: u64) {
    let policy = state.policy.clone().expect("watch mode always has a policy");
    let mut stream: Option<mpsc::UnboundedReceiver<ServerMessage>> = None;
    let mut forwarded = 0usize;
    let mut clock = tokio::time::interval(state.period());
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            msg = next_message(&mut socket) => {
                let reply = match msg {
                    None => return,
                    Some(Err(e)) => Some(error(e)),
                    Some(Ok(ClientMessage::Start { setup, seed })) => {
                        let scene = scene_for(setup, seed);
                        let (tx, rx) = mpsc::unbounded_channel();
                        let policy = policy.clone();
                        let run_scene = scene.clone();
                        let base = seed.unwrap_or(state.cfg.seed);
                        // The rollout runs to completion on a blocking thread; the
                        // session paces its ticks out at the control rate.
                        tokio::task::spawn_blocking(move || {
                            let mut rng = rng_for(base, &[id]);
                            let result = prodapt_core::controller::run_episode_with(
                                &run_scene,
                                &policy.policy,
                                &policy.controller,
                                &policy.keypoints,
                                &SimConfig::default(),
                                &mut rng,
                                |view| {
                                    let _ = tx.send(ServerMessage::from_view(&view));
                                },
                            );
                            let last = match result {
                                Ok(r) => ServerMessage::End { success: r.success, iterations: r.iterations },
                                Err(e) => error(e.to_string()),
                            };
                            let _ = tx.send(last);
                        });
                        stream = Some(rx);
                        forwarded = 0;
                        clock.reset();
                        Some(ServerMessage::Scene { scene })
                    }
                    Some(Ok(ClientMessage::Target { .. })) => Some(error("targets are ignored in watch mode")),
                    Some(Ok(ClientMessage::Stop)) => stream.take().map(|_| ServerMessage::End {
                        success: false,
                        iterations: forwarded,
                    }),
                };
                if let Some(reply) = reply {
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
            }
            _ = clock.tick(), if stream.is_some() => {
                let rx = stream.as_mut().expect("guarded");
                let Some(msg) = rx.recv().await else {
                    stream = None;
                    continue;
                };
                if matches!(msg, ServerMessage::Tick { .. }) {
                    forwarded += 1;
                } else {
                    stream = None;
                }
                if !send(&mut socket, &msg).await {
                    return;
                }
            }
        }
    }
}
