use std::io::{self, Read};

use thiserror::Error;

use crate::tensor::Matrix;

pub const FRAME_MAGIC: &[u8; 4] = b"SFT1";
/// magic + type + iteration + ndim + payload_len + checksum.
pub const FRAME_FIXED_BYTES: usize = 4 + 1 + 8 + 1 + 4 + 4;
/// Refuse to allocate payloads larger than this while decoding.
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unknown message type {0}")]
    UnknownMsgType(u8),

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    ChecksumMismatch { expected: u32, actual: u32 },

    #[error("stream ended {got} bytes into a {needed}-byte read")]
    Truncated { needed: usize, got: usize },

    #[error("malformed frame: {0}")]
    Malformed(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session rejected on field {field:?}: {reason}")]
    Rejected { field: String, reason: String },

    #[error("peer closed the connection")]
    Closed,

    #[error("transport: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    ConfigAck = 2,
    Activation = 3,
    Labels = 4,
    Gradient = 5,
    Metrics = 6,
    Residual = 7,
    Shutdown = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Hello,
        MsgType::ConfigAck,
        MsgType::Activation,
        MsgType::Labels,
        MsgType::Gradient,
        MsgType::Metrics,
        MsgType::Residual,
        MsgType::Shutdown,
    ];

    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        MsgType::ALL
            .get(usize::from(v).wrapping_sub(1))
            .copied()
            .ok_or(WireError::UnknownMsgType(v))
    }

    /// Whether the payload is a dense `f32` tensor described by `dims`.
    pub fn is_tensor(self) -> bool {
        matches!(self, MsgType::Activation | MsgType::Gradient | MsgType::Residual)
    }
}

/// One message on the wire.
///
/// ```text
/// magic "SFT1" | type u8 | iteration u64 | ndim u8 | dims u32 * ndim
///   | payload_len u32 | payload | crc32(payload) u32
/// ```
/// All integers are little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub iteration: u64,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(msg_type: MsgType, iteration: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            iteration,
            dims: vec![],
            payload,
        }
    }

    pub fn tensor(msg_type: MsgType, iteration: u64, m: &Matrix) -> Self {
        let mut payload = Vec::with_capacity(m.len() * 4);
        for v in m.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            msg_type,
            iteration,
            dims: vec![m.rows() as u32, m.cols() as u32],
            payload,
        }
    }

    pub fn labels(iteration: u64, labels: &[u32]) -> Self {
        let mut payload = Vec::with_capacity(labels.len() * 4);
        for l in labels {
            payload.extend_from_slice(&l.to_le_bytes());
        }
        Self {
            msg_type: MsgType::Labels,
            iteration,
            dims: vec![labels.len() as u32],
            payload,
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, WireError> {
        if self.dims.len() != 2 {
            return Err(WireError::Malformed(format!(
                "{:?} frame has {} dims, expected 2",
                self.msg_type,
                self.dims.len()
            )));
        }
        let data = self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::from_vec(self.dims[0] as usize, self.dims[1] as usize, data)
            .map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn to_labels(&self) -> Result<Vec<u32>, WireError> {
        if self.msg_type != MsgType::Labels || self.dims.len() != 1 {
            return Err(WireError::Malformed("not a labels frame".into()));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        FRAME_FIXED_BYTES + 4 * self.dims.len() + self.payload.len()
    }

    fn check_payload_len(msg_type: MsgType, dims: &[u32], len: usize) -> Result<(), WireError> {
        let shaped = msg_type.is_tensor() || msg_type == MsgType::Labels;
        if shaped {
            let want = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d as usize));
            if want != Some(len) {
                return Err(WireError::Malformed(format!(
                    "{msg_type:?} payload of {len} bytes does not match dims {dims:?}"
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(f.wire_len());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(f.msg_type as u8);
    out.extend_from_slice(&f.iteration.to_le_bytes());
    out.push(f.dims.len() as u8);
    for d in &f.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(f.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&f.payload);
    out.extend_from_slice(&crc32fast::hash(&f.payload).to_le_bytes());
    out
}

/// Decodes one frame from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    let mut r = bytes;
    let f = read_frame(&mut r)?;
    Ok((f, bytes.len() - r.len()))
}

/// Reads one frame. A stream that ends cleanly before the first byte yields
/// [`WireError::Closed`]; one that ends mid-frame yields
/// [`WireError::Truncated`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, WireError> {
    let mut head = [0u8; 14];
    let got = read_full(r, &mut head)?;
    if got == 0 {
        return Err(WireError::Closed);
    }
    if got < head.len() {
        return Err(WireError::Truncated { needed: head.len(), got });
    }
    let magic = [head[0], head[1], head[2], head[3]];
    if &magic != FRAME_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let msg_type = MsgType::from_u8(head[4])?;
    let iteration = u64::from_le_bytes(head[5..13].try_into().expect("8 bytes"));
    let ndim = head[13] as usize;
    let mut dim_bytes = vec![0u8; 4 * ndim + 4];
    read_exact(r, &mut dim_bytes)?;
    let dims: Vec<u32> = dim_bytes[..4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let len = u32::from_le_bytes(dim_bytes[4 * ndim..].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD_BYTES {
        return Err(WireError::Malformed(format!("payload length {len} exceeds limit")));
    }
    Frame::check_payload_len(msg_type, &dims, len)?;
    let mut payload = vec![0u8; len];
    read_exact(r, &mut payload)?;
    let mut crc = [0u8; 4];
    read_exact(r, &mut crc)?;
    let expected = u32::from_le_bytes(crc);
    let actual = crc32fast::hash(&payload);
    if expected != actual {
        return Err(WireError::ChecksumMismatch { expected, actual });
    }
    Ok(Frame {
        msg_type,
        iteration,
        dims,
        payload,
    })
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, WireError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    Ok(got)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    let got = read_full(r, buf)?;
    if got < buf.len() {
        return Err(WireError::Truncated { needed: buf.len(), got });
    }
    Ok(())
}

/// Payload of a METRICS frame: loss, correct predictions, batch size and
/// cloud compute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsPayload {
    pub loss: f32,
    pub correct: u32,
    pub total: u32,
    pub cloud_ms: f32,
}

impl MetricsPayload {
    pub const LEN: usize = 16;

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.loss.to_le_bytes());
        v.extend_from_slice(&self.correct.to_le_bytes());
        v.extend_from_slice(&self.total.to_le_bytes());
        v.extend_from_slice(&self.cloud_ms.to_le_bytes());
        v
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() != Self::LEN {
            return Err(WireError::Malformed(format!("metrics payload of {} bytes", b.len())));
        }
        let f = |i: usize| [b[i], b[i + 1], b[i + 2], b[i + 3]];
        Ok(Self {
            loss: f32::from_le_bytes(f(0)),
            correct: u32::from_le_bytes(f(4)),
            total: u32::from_le_bytes(f(8)),
            cloud_ms: f32::from_le_bytes(f(12)),
        })
    }
}
