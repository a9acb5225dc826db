use std::fmt;

use crate::decompose::ResidualMode;
use crate::wire::frame::{Frame, MsgType, WireError};

pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Edge,
    Cloud,
}

/// Which way a frame travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Edge to cloud.
    Up,
    /// Cloud to edge.
    Down,
}

impl Role {
    pub fn outgoing(self) -> Direction {
        match self {
            Role::Edge => Direction::Up,
            Role::Cloud => Direction::Down,
        }
    }

    pub fn incoming(self) -> Direction {
        match self {
            Role::Edge => Direction::Down,
            Role::Cloud => Direction::Up,
        }
    }
}

/// Parameters both ends must agree on before training frames flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    pub version: u16,
    pub model_digest: u64,
    /// Block index of the cut, from 1.
    pub split_layer: u32,
    /// Retained rank. Zero means an undecomposed cut after the whole block.
    pub rank: u32,
    pub residual: ResidualMode,
    pub batch: u32,
    pub seq_len: u32,
}

impl SessionConfig {
    pub const ENCODED_LEN: usize = 2 + 8 + 4 + 4 + 1 + 4 + 4;

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(Self::ENCODED_LEN);
        v.extend_from_slice(&self.version.to_le_bytes());
        v.extend_from_slice(&self.model_digest.to_le_bytes());
        v.extend_from_slice(&self.split_layer.to_le_bytes());
        v.extend_from_slice(&self.rank.to_le_bytes());
        v.push(self.residual.code());
        v.extend_from_slice(&self.batch.to_le_bytes());
        v.extend_from_slice(&self.seq_len.to_le_bytes());
        v
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() != Self::ENCODED_LEN {
            return Err(WireError::Malformed(format!("HELLO payload of {} bytes", b.len())));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        Ok(Self {
            version: u16::from_le_bytes([b[0], b[1]]),
            model_digest: u64::from_le_bytes(b[2..10].try_into().expect("8 bytes")),
            split_layer: u32_at(10),
            rank: u32_at(14),
            residual: ResidualMode::from_code(b[18])
                .ok_or_else(|| WireError::Malformed(format!("residual mode code {}", b[18])))?,
            batch: u32_at(19),
            seq_len: u32_at(23),
        })
    }

    /// Whether each iteration carries the residual operand up and its
    /// gradient down.
    pub fn transfers_residual(&self) -> bool {
        self.rank > 0 && self.residual == ResidualMode::KeptWithTransfer
    }

    /// The first field that differs from `other`, as `(name, ours, theirs)`.
    pub fn first_mismatch(&self, other: &SessionConfig) -> Option<(&'static str, String, String)> {
        let fields: [(&'static str, String, String); 7] = [
            ("version", self.version.to_string(), other.version.to_string()),
            (
                "model_config",
                format!("{:016x}", self.model_digest),
                format!("{:016x}", other.model_digest),
            ),
            ("split_layer", self.split_layer.to_string(), other.split_layer.to_string()),
            ("rank", self.rank.to_string(), other.rank.to_string()),
            ("residual_mode", self.residual.to_string(), other.residual.to_string()),
            ("batch", self.batch.to_string(), other.batch.to_string()),
            ("seq_len", self.seq_len.to_string(), other.seq_len.to_string()),
        ];
        fields.into_iter().find(|(_, a, b)| a != b)
    }
}

/// Answer to a HELLO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigAck {
    Accepted,
    Rejected { field: String, reason: String },
}

impl ConfigAck {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ConfigAck::Accepted => vec![0],
            ConfigAck::Rejected { field, reason } => {
                let field = &field.as_bytes()[..field.len().min(255)];
                let mut v = vec![1, field.len() as u8];
                v.extend_from_slice(field);
                v.extend_from_slice(reason.as_bytes());
                v
            }
        }
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        match b {
            [0] => Ok(ConfigAck::Accepted),
            [1, n, rest @ ..] if rest.len() >= usize::from(*n) => {
                let (field, reason) = rest.split_at(usize::from(*n));
                Ok(ConfigAck::Rejected {
                    field: String::from_utf8_lossy(field).into_owned(),
                    reason: String::from_utf8_lossy(reason).into_owned(),
                })
            }
            _ => Err(WireError::Malformed("CONFIG_ACK payload".into())),
        }
    }
}

/// Position in the per-session message sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    AwaitHello,
    AwaitAck,
    /// Between iterations.
    Ready,
    AwaitResidualUp,
    AwaitLabels,
    AwaitGradient,
    AwaitResidualDown,
    AwaitMetrics,
    Closed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The conversation state machine. Both ends feed it every frame they send
/// and receive; anything out of sequence is a [`WireError::Protocol`].
///
/// ```text
/// HELLO^ ACK v  then per iteration i = 1, 2, ...:
///   ACTIVATION^ [RESIDUAL^] LABELS^ GRADIENT v [RESIDUAL v] METRICS v
/// SHUTDOWN in either direction ends the session.
/// ```
#[derive(Debug, Clone)]
pub struct Protocol {
    phase: Phase,
    transfer: bool,
    /// Iteration in flight, or the last completed one while `Ready`.
    iteration: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self::new()
    }
}

impl Protocol {
    pub fn new() -> Self {
        Self {
            phase: Phase::AwaitHello,
            transfer: false,
            iteration: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Last completed iteration.
    pub fn completed(&self) -> u64 {
        if self.phase == Phase::Ready || self.phase == Phase::Closed {
            self.iteration
        } else {
            self.iteration.saturating_sub(1)
        }
    }

    pub fn observe(&mut self, dir: Direction, frame: &Frame) -> Result<(), WireError> {
        use Direction::{Down, Up};
        use MsgType as M;
        use Phase as P;
        let t = frame.msg_type;
        let it = frame.iteration;
        if matches!(t, M::Hello | M::ConfigAck) && it != 0 {
            return Err(WireError::Protocol(format!("{t:?} must carry iteration 0, got {it}")));
        }
        let next = match (self.phase, dir, t) {
            (P::Closed, _, _) => return Err(self.violation(dir, frame)),
            (_, _, M::Shutdown) if self.phase != P::AwaitHello => P::Closed,
            (P::AwaitHello, Up, M::Hello) => {
                let cfg = SessionConfig::decode(&frame.payload)?;
                self.transfer = cfg.transfers_residual();
                P::AwaitAck
            }
            (P::AwaitAck, Down, M::ConfigAck) => match ConfigAck::decode(&frame.payload)? {
                ConfigAck::Accepted => P::Ready,
                ConfigAck::Rejected { .. } => P::Closed,
            },
            (P::Ready, Up, M::Activation) => {
                if it != self.iteration + 1 {
                    return Err(WireError::Protocol(format!(
                        "ACTIVATION for iteration {it}, expected {}",
                        self.iteration + 1
                    )));
                }
                self.iteration = it;
                if self.transfer {
                    P::AwaitResidualUp
                } else {
                    P::AwaitLabels
                }
            }
            (P::AwaitResidualUp, Up, M::Residual) => P::AwaitLabels,
            (P::AwaitLabels, Up, M::Labels) => P::AwaitGradient,
            (P::AwaitGradient, Down, M::Gradient) => {
                if self.transfer {
                    P::AwaitResidualDown
                } else {
                    P::AwaitMetrics
                }
            }
            (P::AwaitResidualDown, Down, M::Residual) => P::AwaitMetrics,
            (P::AwaitMetrics, Down, M::Metrics) => P::Ready,
            _ => return Err(self.violation(dir, frame)),
        };
        let in_iteration = !matches!(self.phase, P::AwaitHello | P::AwaitAck | P::Ready);
        if in_iteration && t != M::Shutdown && it != self.iteration {
            return Err(WireError::Protocol(format!(
                "{t:?} tagged iteration {it} during iteration {}",
                self.iteration
            )));
        }
        self.phase = next;
        Ok(())
    }

    fn violation(&self, dir: Direction, frame: &Frame) -> WireError {
        WireError::Protocol(format!(
            "unexpected {:?} ({dir:?}, iteration {}) in phase {}",
            frame.msg_type, frame.iteration, self.phase
        ))
    }
}

/// Checks a received HELLO against the local configuration.
pub fn evaluate_hello(local: &SessionConfig, remote: &SessionConfig) -> ConfigAck {
    if remote.residual == ResidualMode::KeptLocal && remote.rank > 0 {
        return ConfigAck::Rejected {
            field: "residual_mode".into(),
            reason: "kept-local cannot run split; use eliminated or kept-transfer".into(),
        };
    }
    match local.first_mismatch(remote) {
        None => ConfigAck::Accepted,
        Some((field, ours, theirs)) => ConfigAck::Rejected {
            field: field.into(),
            reason: format!("cloud has {ours}, edge sent {theirs}"),
        },
    }
}
