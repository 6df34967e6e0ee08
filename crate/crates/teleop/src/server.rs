use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::JoinHandle;

use antislosh_core::ocp::preset;
use antislosh_core::operator_input::OperatorSample;
use antislosh_core::simulation::SimConfig;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};

use crate::control::{self, SessionLog, Shared};
use crate::messages::{parse_inbound, ConfigMessage, ErrorCode, InboundMessage, OutboundMessage};

/// Policy-violation close code sent with a rejected second connection.
const CLOSE_POLICY: u16 = 1008;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub sim: SimConfig,
    /// Where the tick log goes; `None` disables it.
    pub session_log: Option<PathBuf>,
    /// Outbound frames buffered per client before the oldest are dropped.
    pub frame_queue: usize,
}

impl ServeConfig {
    pub fn new(sim: SimConfig) -> Self {
        Self {
            sim,
            session_log: None,
            frame_queue: 16,
        }
    }
}

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error(transparent)]
    Sim(#[from] antislosh_core::error::SimError),
    #[error("session log: {0}")]
    Io(#[from] std::io::Error),
    #[error("control thread panicked")]
    ControlPanic,
}

/// Outcome of a finished service run.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeSummary {
    pub ticks: u64,
    pub session_log: Option<PathBuf>,
}

struct App {
    shared: Arc<Shared>,
    config_frame: String,
    shutdown: watch::Receiver<bool>,
}

/// A running service: the control thread plus the HTTP task.
pub struct TeleopServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    http: tokio::task::JoinHandle<std::io::Result<()>>,
    control: JoinHandle<std::io::Result<()>>,
    session_log: Option<PathBuf>,
}

impl TeleopServer {
    /// Start serving `/teleop` on an already bound listener.
    pub async fn start(listener: TcpListener, config: ServeConfig) -> Result<Self, TeleopError> {
        config.sim.validate()?;
        let addr = listener.local_addr()?;
        let log = config.session_log.as_deref().map(SessionLog::create).transpose()?;
        let shared = Arc::new(Shared::new(config.frame_queue));
        let (shutdown, shutdown_rx) = watch::channel(false);

        let control = {
            let shared = shared.clone();
            let sim = config.sim.clone();
            std::thread::Builder::new()
                .name("control".into())
                .spawn(move || control::run(sim, shared, log))?
        };

        let app = Arc::new(App {
            shared: shared.clone(),
            config_frame: OutboundMessage::Config(ConfigMessage::from_sim(&config.sim)).to_json(),
            shutdown: shutdown_rx.clone(),
        });
        let router = Router::new().route("/teleop", get(upgrade)).with_state(app);
        let mut stop = shutdown_rx;
        let http = tokio::spawn(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async move {
                    let _ = stop.wait_for(|s| *s).await;
                })
                .await
        });

        Ok(Self {
            addr,
            shared,
            shutdown,
            http,
            control,
            session_log: config.session_log,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Control ticks completed so far.
    pub fn ticks(&self) -> u64 {
        self.shared.ticks()
    }

    /// Close any session, stop the loop and flush the session log.
    pub async fn shutdown(self) -> Result<ServeSummary, TeleopError> {
        self.shutdown.send_replace(true);
        self.http.await.map_err(|_| TeleopError::ControlPanic)??;
        self.shared.stop();
        let control = self.control;
        tokio::task::spawn_blocking(move || control.join())
            .await
            .map_err(|_| TeleopError::ControlPanic)?
            .map_err(|_| TeleopError::ControlPanic)??;
        Ok(ServeSummary {
            ticks: self.shared.ticks(),
            session_log: self.session_log,
        })
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| session(socket, app))
}

/// Releases the session slot and the clutch when the connection ends, so the
/// controller falls back to holding the current pose.
struct SessionGuard(Arc<Shared>);

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.0.sample.release_clutch();
        self.0.session_active.store(false, Ordering::Release);
    }
}

async fn send(socket: &mut WebSocket, msg: &OutboundMessage) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

async fn session(mut socket: WebSocket, app: Arc<App>) {
    let shared = &app.shared;
    if shared
        .session_active
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        let reason = "another operator session is active";
        send(&mut socket, &OutboundMessage::error(ErrorCode::SessionBusy, reason)).await;
        let _ = socket
            .send(Message::Close(Some(CloseFrame {
                code: CLOSE_POLICY,
                reason: reason.into(),
            })))
            .await;
        return;
    }
    let _guard = SessionGuard(shared.clone());
    let mut frames = shared.frames.subscribe();
    let mut shutdown = app.shutdown.clone();
    if socket
        .send(Message::Text(app.config_frame.clone().into()))
        .await
        .is_err()
    {
        return;
    }

    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    if let Some(reply) = ingest(shared, text.as_str()) {
                        if !send(&mut socket, &reply).await {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let reply = OutboundMessage::error(ErrorCode::Malformed, "expected a JSON text frame");
                    if !send(&mut socket, &reply).await {
                        break;
                    }
                }
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => {}
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
            },
            frame = frames.recv() => match frame {
                Ok(frame) => {
                    if socket.send(Message::Text(frame)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(skipped)) => {
                    log::debug!("slow client, dropped {skipped} state frames");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            _ = async { shutdown.wait_for(|s| *s).await.map(|_| ()) } => {
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
        }
    }
}

/// Apply one inbound frame; returns the error reply for bad input.
fn ingest(shared: &Shared, text: &str) -> Option<OutboundMessage> {
    match parse_inbound(text) {
        Ok(InboundMessage::Target {
            t,
            device_x,
            device_z,
            clutch,
        }) => {
            shared.sample.publish(OperatorSample {
                t,
                device_x,
                device_z,
                clutch,
            });
            None
        }
        Ok(InboundMessage::SetPreset { name }) => match preset(&name) {
            Ok(weights) => {
                shared.request_preset(name.trim().to_ascii_uppercase(), weights);
                None
            }
            Err(e) => Some(OutboundMessage::error(ErrorCode::UnknownPreset, e.to_string())),
        },
        Err(e) => Some(OutboundMessage::error(ErrorCode::Malformed, e)),
    }
}
