//! JSON wire format shared with the browser client.
//!
//! Client to server: `{"cmd": {"vx", "vy", "wz"}}` or `{"reset": true}`.
//! Server to client: one [`Frame`] per policy step, or `{"error": msg}`.

use quadamp::kinematics::{forward_kinematics, Morphology, NUM_JOINTS, NUM_LEGS};
use quadamp::rewards::CommandTarget;
use quadamp::sim::SimState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message must contain exactly one of \"cmd\" or \"reset\"")]
    Ambiguous,
    #[error("\"reset\" must be true")]
    ResetFalse,
    #[error("binary messages are not supported")]
    Binary,
}

/// Planar twist as carried on the wire.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub wz: f64,
}

impl From<CommandTarget> for Twist {
    fn from(c: CommandTarget) -> Self {
        Twist { vx: c.vx, vy: c.vy, wz: c.yaw_rate }
    }
}

impl From<Twist> for CommandTarget {
    fn from(t: Twist) -> Self {
        CommandTarget { vx: t.vx, vy: t.vy, yaw_rate: t.wz }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClientMessage {
    Command(CommandTarget),
    Reset,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClientMessage {
    cmd: Option<Twist>,
    reset: Option<bool>,
}

pub fn parse_client_message(text: &str) -> Result<ClientMessage, ProtocolError> {
    let raw: RawClientMessage = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    match (raw.cmd, raw.reset) {
        (Some(t), None) => Ok(ClientMessage::Command(t.into())),
        (None, Some(true)) => Ok(ClientMessage::Reset),
        (None, Some(false)) => Err(ProtocolError::ResetFalse),
        _ => Err(ProtocolError::Ambiguous),
    }
}

pub fn encode_command(cmd: &CommandTarget) -> String {
    serde_json::json!({ "cmd": Twist::from(*cmd) }).to_string()
}

pub fn encode_reset() -> String {
    r#"{"reset":true}"#.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Simulation time (s).
    pub t: f64,
    /// `[x, z, pitch]`.
    pub base: [f64; 3],
    pub q: [f64; NUM_JOINTS],
    /// World-frame foot positions `[x, z]`.
    pub feet: [[f64; 2]; NUM_LEGS],
    pub contacts: [bool; NUM_LEGS],
    /// Command applied during the step that produced this frame.
    pub cmd: Twist,
    pub v_meas: Twist,
    pub r_style: f64,
    /// `null` when the body is too slow for a meaningful value.
    pub cot_instant: Option<f64>,
}

impl Frame {
    pub fn from_state(morph: &Morphology, state: &SimState, cmd: &CommandTarget, r_style: f64, cot_instant: Option<f64>) -> Self {
        let feet = forward_kinematics(morph, &state.base, &state.joints.q).map(|p| [p.x, p.y]);
        Frame {
            t: state.time,
            base: [state.base.x, state.base.z, state.base.pitch],
            q: state.joints.q,
            feet,
            contacts: state.contacts,
            cmd: (*cmd).into(),
            v_meas: Twist { vx: state.base.vx, vy: 0.0, wz: 0.0 },
            r_style,
            cot_instant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerMessage {
    Frame(Box<Frame>),
    Error { error: String },
}

pub fn encode_frame(frame: &Frame) -> String {
    serde_json::to_string(frame).expect("frames serialize")
}

pub fn encode_error(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

pub fn decode_server_message(text: &str) -> Result<ServerMessage, ProtocolError> {
    serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
}
