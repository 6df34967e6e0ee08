//! Live operator bridge: a websocket endpoint at `/teleop` feeding device
//! samples to the closed loop and streaming its state back at the control
//! rate.
//!
//! The socket side and the control thread meet at two points only. Inbound
//! samples go into a latest-value slot that the loop reads once per tick;
//! outbound state frames go into a bounded broadcast queue where a slow
//! client loses the oldest frames. Neither ever blocks the loop.

pub mod control;
pub mod messages;
mod server;

pub use messages::{ConfigMessage, ErrorCode, ErrorMessage, InboundMessage, OutboundMessage, StateMessage};
pub use server::{ServeConfig, ServeSummary, TeleopError, TeleopServer};
