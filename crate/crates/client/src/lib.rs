//! Thin async client for the session server's websocket protocol.

use futures::{SinkExt, StreamExt};
use prodapt_core::session::{ClientMessage, ServerMessage};
use prodapt_core::sim2d::Setup;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

pub use prodapt_core::session;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("websocket: {0}")]
    Socket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("bad server message: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("connection closed")]
    Closed,
}

type Stream = WebSocketStream<MaybeTlsStream<tokio::net::TcpStream>>;

pub struct SessionClient {
    ws: Stream,
}

impl SessionClient {
    /// Connects to a session endpoint such as `ws://127.0.0.1:8080/ws`.
    pub async fn connect(url: &str) -> Result<Self, ClientError> {
        let (ws, _) = connect_async(url).await?;
        Ok(Self { ws })
    }

    pub async fn send(&mut self, msg: &ClientMessage) -> Result<(), ClientError> {
        let text = serde_json::to_string(msg)?;
        self.ws.send(Message::text(text)).await?;
        Ok(())
    }

    /// Sends raw text, bypassing message encoding.
    pub async fn send_raw(&mut self, text: &str) -> Result<(), ClientError> {
        self.ws.send(Message::text(text)).await?;
        Ok(())
    }

    pub async fn start(&mut self, setup: Option<Setup>, seed: Option<u64>) -> Result<(), ClientError> {
        self.send(&ClientMessage::Start { setup, seed }).await
    }

    pub async fn target(&mut self, x: f64, y: f64) -> Result<(), ClientError> {
        self.send(&ClientMessage::Target { x, y }).await
    }

    pub async fn stop(&mut self) -> Result<(), ClientError> {
        self.send(&ClientMessage::Stop).await
    }

    /// Next server message, skipping control frames.
    pub async fn recv(&mut self) -> Result<ServerMessage, ClientError> {
        loop {
            match self.ws.next().await {
                None => return Err(ClientError::Closed),
                Some(Err(e)) => return Err(e.into()),
                Some(Ok(Message::Text(text))) => return Ok(serde_json::from_str(text.as_str())?),
                Some(Ok(Message::Close(_))) => return Err(ClientError::Closed),
                Some(Ok(_)) => continue,
            }
        }
    }

    /// Collects messages up to and including the next `end`.
    pub async fn until_end(&mut self) -> Result<Vec<ServerMessage>, ClientError> {
        let mut out = Vec::new();
        loop {
            let msg = self.recv().await?;
            let done = matches!(msg, ServerMessage::End { .. });
            out.push(msg);
            if done {
                return Ok(out);
            }
        }
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        self.ws.close(None).await?;
        Ok(())
    }
}
