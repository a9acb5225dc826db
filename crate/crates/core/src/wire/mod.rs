//! Framed binary protocol between edge and cloud.
//!
//! Every message is one [`Frame`]. A [`Conn`] wraps any byte stream (TCP
//! socket or the in-memory [`pipe`]), checks each frame against the
//! [`Protocol`] state machine, counts bytes and optionally paces sends
//! through a [`Throttle`].

mod frame;
mod protocol;
mod transport;

pub use frame::{
    decode_frame, encode_frame, read_frame, Frame, MetricsPayload, MsgType, WireError, FRAME_FIXED_BYTES,
    FRAME_MAGIC, MAX_PAYLOAD_BYTES,
};
pub use protocol::{
    evaluate_hello, ConfigAck, Direction, Phase, Protocol, Role, SessionConfig, PROTOCOL_VERSION,
};
pub use transport::{
    accept_one, connect, handshake, pipe, throttled_send, Conn, PipeEnd, Throttle, DEFAULT_PORT,
    THROTTLE_CHUNK,
};
