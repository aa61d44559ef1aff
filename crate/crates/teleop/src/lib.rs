//! Websocket bridge between a trained policy running in the simulator and a
//! remote teleoperation client.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{decode_server_message, encode_frame, parse_client_message, ClientMessage, Frame, ServerMessage, Twist};
pub use server::{serve, TeleopError, TeleopServer, DEFAULT_ADDR};
pub use session::{spawn_session, CommandCell, SessionHandle, SessionOptions, TeleopSession};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/teleop.md")]
mod book_teleop {}
