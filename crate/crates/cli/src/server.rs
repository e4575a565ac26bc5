//! HTTP health endpoint and the websocket cue stream.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State as AxState;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use drivecoach::serve::{CuePolicy, Health, Teacher};
use tokio::net::TcpListener;

use crate::protocol::{Connection, Flow};

#[derive(Clone)]
struct AppState {
    teacher: Arc<Teacher>,
    policy: CuePolicy,
}

pub fn router(teacher: Arc<Teacher>, policy: CuePolicy) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/ws", get(ws))
        .with_state(AppState { teacher, policy })
}

async fn healthz(AxState(st): AxState<AppState>) -> Json<Health> {
    Json(st.teacher.health())
}

async fn ws(upgrade: WebSocketUpgrade, AxState(st): AxState<AppState>) -> impl IntoResponse {
    upgrade.on_upgrade(move |socket| session(socket, st))
}

async fn session(mut socket: WebSocket, st: AppState) {
    let mut conn = Connection::new(st.teacher, st.policy);
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let (replies, flow) = conn.handle(text.as_str());
        for r in replies {
            if socket.send(Message::Text(r.to_text().into())).await.is_err() {
                return;
            }
        }
        if flow == Flow::Close {
            let _ = socket.send(Message::Close(None)).await;
            break;
        }
    }
}

/// Binds `addr` and serves until the process is interrupted. Returns the
/// bound address through `on_bound` before serving, which lets callers use
/// port 0.
pub async fn serve(
    teacher: Arc<Teacher>,
    policy: CuePolicy,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(teacher, policy))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
