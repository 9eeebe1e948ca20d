//! The per-connection event stream.
//!
//! Appends are pushed from the conversation's thread into a bounded queue
//! per connection. A connection that falls behind by more than the queue
//! holds is closed; the client reconnects with its cursor and replays the
//! rest from the log.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::extract::ws::{CloseFrame, Message, WebSocket};
use tokio::sync::{mpsc, Notify};

use agentrt::events::serialize_event;
use agentrt::Event;

use crate::host::Hosted;

pub const CLOSE_UNKNOWN_CONVERSATION: u16 = 4404;
pub const CLOSE_TOO_SLOW: u16 = 4408;

/// `{"index":N,"event":<event>}` where the event bytes are exactly what the
/// event file on disk holds.
pub fn frame_text(index: usize, event: &Event) -> String {
    format!("{{\"index\":{index},\"event\":{}}}", serialize_event(event))
}

async fn close(socket: &mut WebSocket, code: u16, reason: &'static str) {
    let _ = socket.send(Message::Close(Some(CloseFrame { code, reason: reason.into() }))).await;
}

pub async fn serve(mut socket: WebSocket, hosted: Option<Arc<Hosted>>, since: usize, queue: usize) {
    let Some(hosted) = hosted else {
        close(&mut socket, CLOSE_UNKNOWN_CONVERSATION, "no such conversation").await;
        return;
    };
    let (tx, mut rx) = mpsc::channel::<(usize, String)>(queue.max(1));
    let overflowed = Arc::new(AtomicBool::new(false));
    let wake = Arc::new(Notify::new());
    let (flag, notify) = (overflowed.clone(), wake.clone());
    let subscribed = hosted.conversation.state().subscribe_from(since, move |index, event| {
        if flag.load(Ordering::Relaxed) {
            return;
        }
        if tx.try_send((index, frame_text(index, event))).is_err() {
            flag.store(true, Ordering::Relaxed);
            notify.notify_one();
        }
    });
    let (backlog, subscription) = match subscribed {
        Ok(pair) => pair,
        Err(e) => {
            log::warn!("cannot stream {}: {e}", hosted.id());
            close(&mut socket, 1011, "state unavailable").await;
            return;
        }
    };
    let mut next = since;
    let mut open = true;
    for (index, event) in backlog {
        if socket.send(Message::Text(frame_text(index, &event).into())).await.is_err() {
            open = false;
            break;
        }
        next = index + 1;
    }
    while open {
        tokio::select! {
            frame = rx.recv() => match frame {
                Some((index, _)) if index < next => {}
                Some((index, text)) if index == next => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                    next += 1;
                }
                // A gap means frames were dropped for this connection.
                Some(_) | None => {
                    close(&mut socket, CLOSE_TOO_SLOW, "subscriber fell behind").await;
                    break;
                }
            },
            _ = wake.notified() => {
                close(&mut socket, CLOSE_TOO_SLOW, "subscriber fell behind").await;
                break;
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
        }
    }
    hosted.conversation.state().unsubscribe(subscription);
}
