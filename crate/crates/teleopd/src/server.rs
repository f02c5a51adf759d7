//! Websocket service: one control loop per connection at the task control
//! rate, bounded number of concurrent sessions.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use resco_core::seeds::episode_seed;
use tokio::net::TcpListener;
use tokio::time::{interval, MissedTickBehavior};
use tracing::{info, warn};

use crate::protocol::{ClientMsg, ServerMsg};
use crate::session::{Session, SessionConfig};

#[derive(Clone)]
pub struct ServeOptions {
    pub session: SessionConfig,
    pub max_sessions: usize,
    pub seed: u64,
    /// Directory receiving `session-<id>.demo` files; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

struct Shared {
    opts: ServeOptions,
    active: AtomicUsize,
    next_id: AtomicU64,
}

/// Decrements the live-session count however the connection ends.
struct Slot(Arc<Shared>);

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

pub fn router(opts: ServeOptions) -> Router {
    let shared = Arc::new(Shared { opts, active: AtomicUsize::new(0), next_id: AtomicU64::new(0) });
    Router::new().route("/ws", get(upgrade)).with_state(shared)
}

/// Bind and serve until the task is cancelled. Returns the bound address via
/// `on_bound` so callers may pass port 0.
pub async fn serve(opts: ServeOptions, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> anyhow::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    info!(%local, "teleoperation service listening on /ws");
    on_bound(local);
    axum::serve(listener, router(opts)).await?;
    Ok(())
}

async fn upgrade(State(shared): State<Arc<Shared>>, ws: WebSocketUpgrade) -> Response {
    let taken = shared.active.fetch_add(1, Ordering::SeqCst);
    if taken >= shared.opts.max_sessions {
        shared.active.fetch_sub(1, Ordering::SeqCst);
        return (StatusCode::SERVICE_UNAVAILABLE, "session limit reached").into_response();
    }
    let slot = Slot(shared.clone());
    ws.on_upgrade(move |socket| run_session(socket, slot)).into_response()
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

async fn run_session(mut socket: WebSocket, slot: Slot) {
    let shared = slot.0.clone();
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let opts = &shared.opts;
    let seed = episode_seed(opts.seed, "session", id);
    let mut session = match Session::new(id, opts.session.clone(), seed) {
        Ok(s) => s,
        Err(e) => {
            let _ = send(&mut socket, &ServerMsg::Error { message: e.to_string() }).await;
            return;
        }
    };
    info!(session = id, seed, "session opened");
    let welcome = ServerMsg::Welcome {
        session: id,
        task: opts.session.env.spec.kind.to_string(),
        rate_hz: opts.session.env.spec.control_rate_hz,
        copilot: opts.session.policy.is_some(),
        seed,
    };
    let period = Duration::from_secs_f64(opts.session.env.spec.control_dt());
    let mut ticker = interval(period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut saved = 0;
    if send(&mut socket, &welcome).await {
        loop {
            tokio::select! {
                _ = ticker.tick() => {
                    let msg = match session.tick() {
                        Ok(s) => ServerMsg::State(s),
                        Err(e) => ServerMsg::Error { message: e.to_string() },
                    };
                    if !send(&mut socket, &msg).await {
                        break;
                    }
                    if session.demos().episodes.len() > saved {
                        saved = session.demos().episodes.len();
                        save(opts, id, session.demos());
                    }
                }
                incoming = socket.recv() => {
                    let text = match incoming {
                        Some(Ok(Message::Text(t))) => t,
                        Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                        Some(Ok(_)) => continue,
                    };
                    let result = serde_json::from_str::<ClientMsg>(&text).map_err(anyhow::Error::from).and_then(|m| session.submit(m));
                    if let Err(e) = result {
                        if !send(&mut socket, &ServerMsg::Error { message: e.to_string() }).await {
                            break;
                        }
                    }
                }
            }
        }
    }
    let demos = session.close();
    if demos.episodes.len() > saved {
        save(opts, id, &demos);
    }
    info!(session = id, ticks = session.tick_count(), recorded = demos.episodes.len(), "session closed");
}

fn save(opts: &ServeOptions, id: u64, demos: &resco_core::pilots::DemoDataset) {
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(format!("session-{id}.demo"));
        if let Err(e) = demos.save(&path) {
            warn!(session = id, path = %path.display(), "could not save recording: {e}");
        }
    }
}
