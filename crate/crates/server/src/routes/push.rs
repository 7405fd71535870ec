use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::response::Response;
use codeaudit_core::api::PushEvent;
use serde::Deserialize;
use tokio::sync::broadcast::error::RecvError;
use uuid::Uuid;

use super::{member_project, AuthUser};
use crate::error::ApiError;
use crate::events::Subscription;
use crate::state::AppState;

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    last_event_id: Option<u64>,
}

/// Project push channel. A client reconnecting with `last_event_id` (query
/// or `Last-Event-ID` header) first receives the buffered events after it.
pub async fn events(
    State(state): State<AppState>,
    AuthUser(user): AuthUser,
    Path(project_id): Path<Uuid>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    member_project(&state, project_id, user)?;
    let last = q.last_event_id.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok())
    });
    let sub = state.hub.subscribe(project_id, last);
    Ok(ws.on_upgrade(move |socket| forward(socket, sub)))
}

async fn send(socket: &mut WebSocket, event: &PushEvent) -> bool {
    let text = serde_json::to_string(event).expect("events serialise");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn forward(mut socket: WebSocket, sub: Subscription) {
    let Subscription { replay, mut live } = sub;
    let mut sent = 0u64;
    for event in &replay {
        if !send(&mut socket, event).await {
            return;
        }
        sent = event.event_id;
    }
    loop {
        tokio::select! {
            received = live.recv() => match received {
                Ok(event) => {
                    if event.event_id <= sent {
                        continue;
                    }
                    sent = event.event_id;
                    if !send(&mut socket, &event).await {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    tracing::warn!(skipped = n, "push subscriber lagged; reconnect with last_event_id to catch up");
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
