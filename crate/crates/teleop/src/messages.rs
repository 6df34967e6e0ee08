//! Wire format of the `/teleop` socket: one JSON object per text frame,
//! discriminated by `type`.

use antislosh_core::dynamics::LiquidParams;
use antislosh_core::kinematics::{Pose2D, RobotParams};
use antislosh_core::ocp::Bounds;
use antislosh_core::simulation::{SimConfig, TickRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InboundMessage {
    /// Device position in meters. `t` is the client clock and only
    /// informational; the server orders samples by arrival.
    Target {
        t: f64,
        device_x: f64,
        device_z: f64,
        clutch: bool,
    },
    SetPreset {
        name: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutboundMessage {
    State(StateMessage),
    Config(ConfigMessage),
    Error(ErrorMessage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub t: f64,
    pub q: [f64; 3],
    pub beta: f64,
    pub betadot: f64,
    pub pose: Pose2D,
    pub reference: Pose2D,
    pub u: [f64; 3],
    pub solve_ms: f64,
    pub preset: String,
    pub gate: bool,
}

impl StateMessage {
    pub fn from_record(record: &TickRecord, preset: &str) -> Self {
        Self {
            t: record.t,
            q: record.q.into(),
            beta: record.beta,
            betadot: record.betadot,
            pose: record.pose,
            reference: record.reference,
            u: record.u.into(),
            solve_ms: record.solve_ms,
            preset: preset.to_string(),
            gate: record.gate_fired,
        }
    }

    fn is_finite(&self) -> bool {
        let pose = |p: &Pose2D| p.x.is_finite() && p.z.is_finite() && p.theta.is_finite();
        self.q.iter().chain(&self.u).all(|v| v.is_finite())
            && self.beta.is_finite()
            && self.betadot.is_finite()
            && self.solve_ms.is_finite()
            && pose(&self.pose)
            && pose(&self.reference)
    }
}

/// Static scene description sent once per connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMessage {
    pub robot: RobotParams,
    pub bounds: Bounds,
    pub liquid: LiquidParams,
    pub control_rate_hz: f64,
    pub horizon: usize,
    pub preset: String,
}

impl ConfigMessage {
    pub fn from_sim(config: &SimConfig) -> Self {
        Self {
            robot: config.robot,
            bounds: config.bounds,
            liquid: config.liquid,
            control_rate_hz: config.control_rate_hz,
            horizon: config.horizon.n,
            preset: config.preset.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Frame is not a valid inbound message.
    Malformed,
    /// Unknown preset name.
    UnknownPreset,
    /// Another operator holds the session.
    SessionBusy,
    /// The plant state blew up; the controller was reset.
    PlantDiverged,
}

impl OutboundMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        OutboundMessage::Error(ErrorMessage {
            code,
            message: message.into(),
        })
    }

    /// JSON text. State frames with non-finite numbers are replaced by an
    /// error frame since JSON cannot carry them.
    pub fn to_json(&self) -> String {
        if let OutboundMessage::State(s) = self {
            if !s.is_finite() {
                return OutboundMessage::error(ErrorCode::PlantDiverged, "state contains non-finite values").to_json();
            }
        }
        serde_json::to_string(self).expect("message types always serialize")
    }
}

/// Parse one inbound frame, rejecting non-finite device coordinates.
pub fn parse_inbound(text: &str) -> Result<InboundMessage, String> {
    let msg: InboundMessage = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if let InboundMessage::Target {
        t, device_x, device_z, ..
    } = msg
    {
        if !(t.is_finite() && device_x.is_finite() && device_z.is_finite()) {
            return Err("target coordinates must be finite".to_string());
        }
    }
    Ok(msg)
}
