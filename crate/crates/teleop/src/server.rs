use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use quadamp::checkpoint::{Checkpoint, CheckpointError};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{broadcast, mpsc};
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::{encode_error, parse_client_message, ClientMessage, ProtocolError};
use crate::session::{spawn_session, SessionOptions, TeleopSession};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8090";

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("teleop i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("websocket: {0}")]
    WebSocket(#[from] tokio_tungstenite::tungstenite::Error),
}

pub struct TeleopServer {
    listener: TcpListener,
    checkpoint: Arc<Checkpoint>,
    options: SessionOptions,
}

impl TeleopServer {
    pub async fn bind(addr: impl ToSocketAddrs, checkpoint: Checkpoint, options: SessionOptions) -> Result<Self, TeleopError> {
        Ok(TeleopServer { listener: TcpListener::bind(addr).await?, checkpoint: Arc::new(checkpoint), options })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TeleopError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until the task is cancelled. Each connection gets
    /// its own simulator.
    pub async fn run(self) -> Result<(), TeleopError> {
        loop {
            let (stream, _) = self.listener.accept().await?;
            let (ckpt, options) = (self.checkpoint.clone(), self.options.clone());
            tokio::spawn(async move {
                // A failed handshake or dropped socket only ends that session.
                let _ = handle_connection(stream, ckpt, options).await;
            });
        }
    }
}

/// Loads `checkpoint` and serves it on `addr` until interrupted.
pub async fn serve(checkpoint: impl AsRef<Path>, addr: impl ToSocketAddrs) -> Result<(), TeleopError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    TeleopServer::bind(addr, ckpt, SessionOptions::default()).await?.run().await
}

async fn handle_connection(stream: TcpStream, ckpt: Arc<Checkpoint>, options: SessionOptions) -> Result<(), TeleopError> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut sink, mut source) = ws.split();
    let (frame_tx, mut frames) = broadcast::channel(options.queue_capacity.max(1));
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<String>();
    let mut session = spawn_session(TeleopSession::from_checkpoint(&ckpt), options, frame_tx);

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                frame = frames.recv() => match frame {
                    Ok(text) => text,
                    // The client fell behind and the oldest frames were dropped.
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                reply = replies.recv() => match reply {
                    Some(text) => text,
                    None => break,
                },
            };
            if sink.send(Message::text(text)).await.is_err() {
                break;
            }
        }
    });

    while let Some(message) = source.next().await {
        let parsed = match message {
            Ok(Message::Text(text)) => parse_client_message(text.as_str()),
            Ok(Message::Binary(_)) => Err(ProtocolError::Binary),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        match parsed {
            Ok(ClientMessage::Command(cmd)) => session.commands.set(cmd),
            Ok(ClientMessage::Reset) => session.reset.store(true, Ordering::SeqCst),
            Err(e) => {
                let _ = reply_tx.send(encode_error(&e.to_string()));
            }
        }
    }
    writer.abort();
    tokio::task::spawn_blocking(move || session.stop()).await.ok();
    Ok(())
}
