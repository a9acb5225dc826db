use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::wire::frame::{encode_frame, read_frame, Frame, WireError};
use crate::wire::protocol::{
    evaluate_hello, ConfigAck, Phase, Protocol, Role, SessionConfig, PROTOCOL_VERSION,
};
use crate::wire::MsgType;

pub const DEFAULT_PORT: u16 = 7631;
/// Largest write between throttle waits.
pub const THROTTLE_CHUNK: usize = 16 * 1024;

/// Sender-side token bucket on a monotonic clock.
///
/// Tokens are bytes. The bucket may go into debt; a send that leaves it
/// negative sleeps until the debt is repaid, so after any send the elapsed
/// time is at least `(bytes - burst) * 8 / rate`.
#[derive(Debug, Clone)]
pub struct Throttle {
    bytes_per_sec: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl Throttle {
    pub fn new(bandwidth_bps: f64) -> Result<Self, WireError> {
        Self::with_burst(bandwidth_bps, 0)
    }

    pub fn with_burst(bandwidth_bps: f64, burst_bytes: usize) -> Result<Self, WireError> {
        if !(bandwidth_bps > 0.0 && bandwidth_bps.is_finite()) {
            return Err(WireError::Io(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bandwidth must be positive and finite, got {bandwidth_bps}"),
            )));
        }
        Ok(Self {
            bytes_per_sec: bandwidth_bps / 8.0,
            burst: burst_bytes as f64,
            tokens: burst_bytes as f64,
            last: Instant::now(),
        })
    }

    pub fn bandwidth_bps(&self) -> f64 {
        self.bytes_per_sec * 8.0
    }

    /// Charges `n` bytes and returns how long to wait before continuing.
    pub fn charge(&mut self, n: usize) -> Duration {
        let now = Instant::now();
        let refill = now.duration_since(self.last).as_secs_f64() * self.bytes_per_sec;
        self.tokens = (self.tokens + refill).min(self.burst) - n as f64;
        self.last = now;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.bytes_per_sec)
        }
    }
}

/// Writes `bytes`, pacing through `throttle` when given. Returns the number
/// of bytes written.
pub fn throttled_send<W: Write>(w: &mut W, bytes: &[u8], throttle: Option<&mut Throttle>) -> io::Result<usize> {
    match throttle {
        None => w.write_all(bytes)?,
        Some(t) => {
            for chunk in bytes.chunks(THROTTLE_CHUNK) {
                w.write_all(chunk)?;
                let wait = t.charge(chunk.len());
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
        }
    }
    w.flush()?;
    Ok(bytes.len())
}

/// A framed, protocol-checked connection over any byte stream.
#[derive(Debug)]
pub struct Conn<S> {
    stream: S,
    role: Role,
    protocol: Protocol,
    throttle: Option<Throttle>,
    bytes_sent: u64,
    bytes_received: u64,
}

impl<S: Read + Write> Conn<S> {
    pub fn new(stream: S, role: Role) -> Self {
        Self {
            stream,
            role,
            protocol: Protocol::new(),
            throttle: None,
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    pub fn with_throttle(mut self, throttle: Option<Throttle>) -> Self {
        self.throttle = throttle;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.protocol.phase()
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    /// Validates, encodes and writes `frame`. Returns its wire size.
    pub fn send(&mut self, frame: &Frame) -> Result<usize, WireError> {
        self.protocol.observe(self.role.outgoing(), frame)?;
        let bytes = encode_frame(frame);
        let n = throttled_send(&mut self.stream, &bytes, self.throttle.as_mut()).map_err(|e| {
            if e.kind() == io::ErrorKind::BrokenPipe {
                WireError::Closed
            } else {
                WireError::Io(e)
            }
        })?;
        self.bytes_sent += n as u64;
        Ok(n)
    }

    /// Reads and validates the next frame.
    pub fn recv(&mut self) -> Result<Frame, WireError> {
        let frame = read_frame(&mut self.stream)?;
        self.bytes_received += frame.wire_len() as u64;
        self.protocol.observe(self.role.incoming(), &frame)?;
        Ok(frame)
    }

    /// Receives a frame and checks its type.
    pub fn expect(&mut self, t: MsgType) -> Result<Frame, WireError> {
        let f = self.recv()?;
        if f.msg_type == MsgType::Shutdown && t != MsgType::Shutdown {
            return Err(WireError::Closed);
        }
        if f.msg_type != t {
            // Unreachable in practice: `recv` already enforces ordering.
            return Err(WireError::Protocol(format!("expected {t:?}, got {:?}", f.msg_type)));
        }
        Ok(f)
    }

    pub fn shutdown(&mut self) -> Result<(), WireError> {
        if self.protocol.phase() == Phase::Closed {
            return Ok(());
        }
        let it = self.protocol.completed();
        self.send(&Frame::control(MsgType::Shutdown, it, vec![]))?;
        Ok(())
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

/// Runs the opening exchange. The edge sends HELLO and waits for the
/// verdict; the cloud answers and, on mismatch, reports the same rejection
/// locally.
pub fn handshake<S: Read + Write>(conn: &mut Conn<S>, cfg: &SessionConfig) -> Result<SessionConfig, WireError> {
    if cfg.version != PROTOCOL_VERSION {
        return Err(WireError::Rejected {
            field: "version".into(),
            reason: format!("local version {} is not {PROTOCOL_VERSION}", cfg.version),
        });
    }
    match conn.role() {
        Role::Edge => {
            conn.send(&Frame::control(MsgType::Hello, 0, cfg.encode()))?;
            let ack = conn.expect(MsgType::ConfigAck)?;
            match ConfigAck::decode(&ack.payload)? {
                ConfigAck::Accepted => Ok(*cfg),
                ConfigAck::Rejected { field, reason } => Err(WireError::Rejected { field, reason }),
            }
        }
        Role::Cloud => {
            let hello = conn.expect(MsgType::Hello)?;
            let remote = SessionConfig::decode(&hello.payload)?;
            let verdict = evaluate_hello(cfg, &remote);
            conn.send(&Frame::control(MsgType::ConfigAck, 0, verdict.encode()))?;
            match verdict {
                ConfigAck::Accepted => Ok(remote),
                ConfigAck::Rejected { field, reason } => Err(WireError::Rejected { field, reason }),
            }
        }
    }
}

#[derive(Debug, Default)]
struct PipeBuf {
    data: VecDeque<u8>,
    /// The writing end has gone away.
    writer_gone: bool,
    /// The reading end has gone away.
    reader_gone: bool,
}

#[derive(Debug, Default)]
struct Channel {
    buf: Mutex<PipeBuf>,
    ready: Condvar,
}

/// One end of an in-memory duplex byte stream.
#[derive(Debug)]
pub struct PipeEnd {
    rx: Arc<Channel>,
    tx: Arc<Channel>,
}

/// Two connected in-memory stream ends. Reads block until data arrives or
/// the other end is dropped.
pub fn pipe() -> (PipeEnd, PipeEnd) {
    let a = Arc::new(Channel::default());
    let b = Arc::new(Channel::default());
    (
        PipeEnd {
            rx: a.clone(),
            tx: b.clone(),
        },
        PipeEnd { rx: b, tx: a },
    )
}

impl Read for PipeEnd {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        let mut buf = self.rx.buf.lock().expect("pipe lock poisoned");
        while buf.data.is_empty() && !buf.writer_gone {
            buf = self.rx.ready.wait(buf).expect("pipe lock poisoned");
        }
        let n = out.len().min(buf.data.len());
        for (dst, src) in out.iter_mut().zip(buf.data.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        let mut buf = self.tx.buf.lock().expect("pipe lock poisoned");
        if buf.reader_gone {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader dropped"));
        }
        buf.data.extend(data);
        self.tx.ready.notify_all();
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeEnd {
    fn drop(&mut self) {
        if let Ok(mut b) = self.tx.buf.lock() {
            b.writer_gone = true;
        }
        self.tx.ready.notify_all();
        if let Ok(mut b) = self.rx.buf.lock() {
            b.reader_gone = true;
        }
    }
}

/// Connects with a timeout on each resolved address and disables Nagle.
pub fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = None;
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{addr} resolves to nothing"))))
}

/// Accepts exactly one peer.
pub fn accept_one(listener: &TcpListener) -> io::Result<(TcpStream, SocketAddr)> {
    let (s, peer) = listener.accept()?;
    s.set_nodelay(true)?;
    Ok((s, peer))
}
