use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::channel::{RecvError, Transport};
use super::frame::{decode_matrix, encode_real, encode_ring, Frame, MatrixPayload, MessageKind, SessionId};
use super::throttle::{ThrottleSpec, TokenBucket};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::ring::FxMatrix;
use crate::role::RoleId;

/// One captured frame, as it left its sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapEntry {
    pub from: RoleId,
    pub to: RoleId,
    pub frame: Frame,
}

/// Shared transcript recorder. Several links may write into the same tap.
#[derive(Debug, Clone, Default)]
pub struct Tap(Arc<Mutex<Vec<TapEntry>>>);

impl Tap {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, entry: TapEntry) {
        self.0.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<TapEntry> {
        self.0.lock().unwrap().clone()
    }

    pub fn take(&self) -> Vec<TapEntry> {
        std::mem::take(&mut *self.0.lock().unwrap())
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outbound accounting for one link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStats {
    pub frames: [u64; 8],
    pub bytes: [u64; 8],
    pub stall: [Duration; 8],
}

impl LinkStats {
    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().sum()
    }

    pub fn total_stall(&self) -> Duration {
        self.stall.iter().sum()
    }

    pub fn bytes_of(&self, kind: MessageKind) -> u64 {
        self.bytes[kind.index()]
    }

    pub fn merge(&mut self, other: &LinkStats) {
        for i in 0..8 {
            self.frames[i] += other.frames[i];
            self.bytes[i] += other.bytes[i];
            self.stall[i] += other.stall[i];
        }
    }
}

/// A sequenced, typed, point-to-point connection between two roles.
pub struct Link {
    local: RoleId,
    peer: RoleId,
    transport: Box<dyn Transport>,
    session: SessionId,
    send_seq: u64,
    recv_seq: u64,
    timeout: Duration,
    throttle: Option<TokenBucket>,
    tap: Option<Tap>,
    stats: LinkStats,
    aborted: bool,
}

impl std::fmt::Debug for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Link")
            .field("local", &self.local)
            .field("peer", &self.peer)
            .field("send_seq", &self.send_seq)
            .field("recv_seq", &self.recv_seq)
            .finish()
    }
}

impl Link {
    pub fn new(local: RoleId, peer: RoleId, transport: Box<dyn Transport>, timeout: Duration) -> Link {
        Link {
            local,
            peer,
            transport,
            session: [0; 16],
            send_seq: 0,
            recv_seq: 0,
            timeout,
            throttle: None,
            tap: None,
            stats: LinkStats::default(),
            aborted: false,
        }
    }

    /// Two ends of an in-process link between `a` and `b`.
    pub fn loopback_pair(a: RoleId, b: RoleId, timeout: Duration) -> (Link, Link) {
        let (ta, tb) = super::channel::Loopback::pair();
        (
            Link::new(a, b, Box::new(ta), timeout),
            Link::new(b, a, Box::new(tb), timeout),
        )
    }

    pub fn local(&self) -> RoleId {
        self.local
    }

    pub fn peer(&self) -> RoleId {
        self.peer
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn set_session(&mut self, id: SessionId) {
        self.session = id;
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn set_throttle(&mut self, spec: ThrottleSpec) {
        self.throttle = TokenBucket::new(spec);
    }

    pub fn set_tap(&mut self, tap: Option<Tap>) {
        self.tap = tap;
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    pub fn send_frame(&mut self, kind: MessageKind, payload: Vec<u8>) -> Result<()> {
        let frame = Frame {
            kind,
            session_id: self.session,
            seq: self.send_seq,
            payload,
        };
        self.send_seq += 1;
        let bytes = frame.encode();
        let stall = match &mut self.throttle {
            Some(bucket) => bucket.acquire(bytes.len()),
            None => Duration::ZERO,
        };
        let k = kind.index();
        self.stats.frames[k] += 1;
        self.stats.bytes[k] += bytes.len() as u64;
        self.stats.stall[k] += stall;
        if let Some(tap) = &self.tap {
            tap.push(TapEntry {
                from: self.local,
                to: self.peer,
                frame,
            });
        }
        self.transport.send(bytes).map_err(|e| Error::Aborted {
            role: self.peer.to_string(),
            reason: format!("send failed: {e}"),
        })
    }

    /// Receives the next frame, which must be of kind `expected`.
    pub fn recv_frame(&mut self, expected: MessageKind) -> Result<Vec<u8>> {
        let raw = match self.transport.recv(self.timeout) {
            Ok(raw) => raw,
            Err(RecvError::Timeout) => {
                return Err(Error::Timeout {
                    after: self.timeout,
                    peer: self.peer.to_string(),
                    waiting_for: format!("{expected:?}"),
                })
            }
            Err(RecvError::Closed) => {
                return Err(Error::Aborted {
                    role: self.peer.to_string(),
                    reason: "connection closed".into(),
                })
            }
            Err(RecvError::Io(e)) => return Err(Error::Io(e)),
            Err(RecvError::Malformed(m)) => return Err(Error::Protocol(m)),
        };
        let frame = Frame::decode(&raw)?;
        if frame.kind == MessageKind::Abort {
            return Err(Error::Aborted {
                role: self.peer.to_string(),
                reason: String::from_utf8_lossy(&frame.payload).into_owned(),
            });
        }
        if frame.seq != self.recv_seq {
            return Err(Error::Protocol(format!(
                "seq gap from {}: expected {}, got {}",
                self.peer, self.recv_seq, frame.seq
            )));
        }
        self.recv_seq += 1;
        if frame.session_id != self.session {
            return Err(Error::Protocol(format!(
                "frame from {} carries session {} but this link is bound to {}",
                self.peer,
                hex::encode(frame.session_id),
                hex::encode(self.session)
            )));
        }
        if frame.kind != expected {
            return Err(Error::UnexpectedKind {
                peer: self.peer.to_string(),
                expected,
                got: frame.kind,
            });
        }
        Ok(frame.payload)
    }

    fn check_matrix_kind(kind: MessageKind) -> Result<()> {
        if kind.carries_matrix() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{kind:?} frames do not carry matrices")))
        }
    }

    pub fn send_ring(&mut self, kind: MessageKind, m: &FxMatrix) -> Result<()> {
        Self::check_matrix_kind(kind)?;
        self.send_frame(kind, encode_ring(m))
    }

    pub fn send_real(&mut self, kind: MessageKind, t: &Tensor) -> Result<()> {
        Self::check_matrix_kind(kind)?;
        self.send_frame(kind, encode_real(t))
    }

    pub fn recv_ring(&mut self, kind: MessageKind) -> Result<FxMatrix> {
        Self::check_matrix_kind(kind)?;
        match decode_matrix(&self.recv_frame(kind)?)? {
            MatrixPayload::Ring(m) => Ok(m),
            MatrixPayload::Real(_) => Err(Error::Protocol(format!(
                "expected ring matrix from {}, got reals",
                self.peer
            ))),
        }
    }

    pub fn recv_real(&mut self, kind: MessageKind) -> Result<Tensor> {
        Self::check_matrix_kind(kind)?;
        match decode_matrix(&self.recv_frame(kind)?)? {
            MatrixPayload::Real(t) => Ok(t),
            MatrixPayload::Ring(_) => Err(Error::Protocol(format!(
                "expected real matrix from {}, got ring elements",
                self.peer
            ))),
        }
    }

    /// Best-effort Abort notification; later calls are no-ops.
    pub fn abort(&mut self, reason: &str) {
        if self.aborted {
            return;
        }
        self.aborted = true;
        let frame = Frame {
            kind: MessageKind::Abort,
            session_id: self.session,
            seq: self.send_seq,
            payload: reason.as_bytes().to_vec(),
        };
        self.send_seq += 1;
        let _ = self.transport.send(frame.encode());
    }
}
