//! Framed messaging between the three roles.
//!
//! [`frame`] fixes the bit-exact wire format, [`channel`] moves encoded frames
//! over in-process queues or TCP, [`Link`] adds sequencing, typed matrix
//! exchange, throttling and transcript capture, and [`Mesh`] groups one role's
//! two links and runs the session handshake.

pub mod channel;
pub mod frame;
mod link;
mod session;
mod throttle;

pub use channel::{Loopback, RecvError, TcpTransport, Transport};
pub use frame::{
    decode_matrix, encode_real, encode_ring, Frame, MatrixPayload, MessageKind, SessionId, HEADER_LEN,
    MAGIC, WIRE_VERSION,
};
pub use link::{Link, LinkStats, Tap, TapEntry};
pub use session::{
    loopback_mesh, session_id_for, tcp_mesh, ConfigDigest, Endpoints, Mesh, DEFAULT_HANDSHAKE_TIMEOUT,
    DEFAULT_STEP_TIMEOUT,
};
pub use throttle::{ThrottleSpec, TokenBucket, BURST_BYTES};
