//! Trial server: one websocket session per connection at `/ws`, static
//! files for the operator console everywhere else.

pub mod protocol;
pub mod session;

pub use protocol::{
    AgentChoice, ClientEnvelope, ControlCommand, Phase, ServerEnvelope, ServerMessage, StateUpdate, TrialConfig,
};
pub use session::Session;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;
use tokio::net::TcpListener;
use tokio::time::Instant;
use tower_http::services::ServeDir;

use crate::demos::DemoStore;
use crate::sim::WorldConfig;

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "SKYGUARD_PORT";

/// Port from `SKYGUARD_PORT`, else 8080.
pub fn port_from_env() -> u16 {
    std::env::var(PORT_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_PORT)
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub world: WorldConfig,
    /// Directory with the operator console bundle.
    pub static_dir: Option<PathBuf>,
    /// Recorded episodes are appended here.
    pub demo_store: Option<PathBuf>,
    /// Wall-clock seconds per tick at speed 1; defaults to the world tick.
    pub tick_wall_seconds: Option<f64>,
}

impl ServerOptions {
    pub fn new(world: WorldConfig) -> Self {
        Self { world, static_dir: None, demo_store: None, tick_wall_seconds: None }
    }

    fn tick_interval(&self, speed: u32) -> Duration {
        let base = self.tick_wall_seconds.unwrap_or(self.world.tick_seconds);
        Duration::from_secs_f64(base / f64::from(speed.max(1)))
    }
}

struct AppState {
    options: ServerOptions,
    sessions: AtomicU64,
}

pub fn router(options: ServerOptions) -> Router {
    let static_dir = options.static_dir.clone();
    let state = Arc::new(AppState { options, sessions: AtomicU64::new(0) });
    let app = Router::new().route("/ws", get(ws_handler)).route("/health", get(|| async { "ok" }));
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, options: ServerOptions) -> std::io::Result<()> {
    axum::serve(listener, router(options)).await
}

pub async fn bind(port: u16) -> std::io::Result<TcpListener> {
    TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_connection(socket, state))
}

fn persist(state: &AppState, session: &mut Session) {
    let demos = session.take_finished();
    if demos.is_empty() {
        return;
    }
    if let Some(path) = &state.options.demo_store {
        if let Err(e) = DemoStore::open(path).append_all(&demos) {
            log::error!("could not record {} episode(s) to {}: {e}", demos.len(), path.display());
        }
    }
}

/// Session loop: owns the world, applies commands between ticks, paces
/// ticks at `tick_wall_seconds / speed` and throttles broadcasts to the
/// configured update frequency.
async fn run_connection(socket: WebSocket, state: Arc<AppState>) {
    let id = state.sessions.fetch_add(1, Ordering::Relaxed);
    let mut session = Session::new(state.options.world.clone(), format!("session-{id}"));
    let (mut sink, mut stream) = socket.split();
    let mut out_seq = 0u64;
    let mut next_tick: Option<Instant> = None;
    let mut last_broadcast: Option<Instant> = None;

    macro_rules! send {
        ($messages:expr) => {{
            let mut failed = false;
            for message in $messages {
                out_seq += 1;
                let text = ServerEnvelope { seq: out_seq, message }.to_text();
                if sink.send(Message::Text(text)).await.is_err() {
                    failed = true;
                    break;
                }
            }
            failed
        }};
    }

    loop {
        let tick_due = async {
            match next_tick {
                Some(t) => tokio::time::sleep_until(t).await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let before = (session.phase(), session.speed());
                let messages = match ClientEnvelope::parse(&text) {
                    Ok(env) => session.handle_command(env.command, Some(env.seq)),
                    Err(e) => vec![ServerMessage::error("bad_message", e, None)],
                };
                persist(&state, &mut session);
                if messages.iter().any(|m| matches!(m, ServerMessage::StateUpdate(_))) {
                    last_broadcast = Some(Instant::now());
                }
                if send!(messages) {
                    break;
                }
                let after = (session.phase(), session.speed());
                if after != before {
                    next_tick = (session.phase() == Phase::Running)
                        .then(|| Instant::now() + state.options.tick_interval(session.speed()));
                }
            }
            _ = tick_due => {
                let mut messages = session.tick();
                persist(&state, &mut session);
                let now = Instant::now();
                let period = Duration::from_secs_f64(1.0 / session.config().update_frequency);
                let due = last_broadcast.is_none_or(|t| now.duration_since(t) >= period);
                if messages.is_empty() && due {
                    messages.push(session.state_message());
                }
                if !messages.is_empty() {
                    last_broadcast = Some(now);
                }
                if send!(messages) {
                    break;
                }
                next_tick = match (session.phase(), next_tick) {
                    (Phase::Running, Some(t)) => Some(t + state.options.tick_interval(session.speed())),
                    _ => None,
                };
            }
        }
    }
    session.disconnect();
    persist(&state, &mut session);
}
