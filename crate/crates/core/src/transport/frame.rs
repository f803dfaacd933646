//! Bit-exact wire encoding.
//!
//! ```text
//! frame   = "P2N2" | version u16 LE | kind u8 | session_id [16] | seq u64 LE
//!         | payload_len u32 LE | payload
//! matrix  = rows u32 LE | cols u32 LE | elem_kind u8 | elements LE row-major
//! ```
//! `elem_kind` is 0 for ring elements (u64) and 1 for reals (f64).

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::ring::{FxMatrix, RingElem};

pub const MAGIC: [u8; 4] = *b"P2N2";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 16 + 8 + 4;
pub const MATRIX_HEADER_LEN: usize = 4 + 4 + 1;

pub type SessionId = [u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 0,
    Config = 1,
    ShareBlock = 2,
    HiddenActivations = 3,
    Gradient = 4,
    DefenderStats = 5,
    TraceRecord = 6,
    Abort = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Hello,
        MessageKind::Config,
        MessageKind::ShareBlock,
        MessageKind::HiddenActivations,
        MessageKind::Gradient,
        MessageKind::DefenderStats,
        MessageKind::TraceRecord,
        MessageKind::Abort,
    ];

    pub fn from_u8(v: u8) -> Option<MessageKind> {
        MessageKind::ALL.get(v as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Kinds whose payload is a matrix.
    pub fn carries_matrix(self) -> bool {
        matches!(
            self,
            MessageKind::ShareBlock
                | MessageKind::HiddenActivations
                | MessageKind::Gradient
                | MessageKind::DefenderStats
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageKind,
    pub session_id: SessionId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses the fixed header, returning the frame skeleton and payload length.
    pub fn decode_header(h: &[u8]) -> Result<(MessageKind, SessionId, u64, usize)> {
        if h.len() < HEADER_LEN {
            return Err(Error::Protocol(format!(
                "truncated frame header: {} of {HEADER_LEN} bytes",
                h.len()
            )));
        }
        if h[0..4] != MAGIC {
            return Err(Error::Protocol(format!("bad magic {:02x?}", &h[0..4])));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != WIRE_VERSION {
            return Err(Error::Protocol(format!("unsupported wire version {version}")));
        }
        let kind = MessageKind::from_u8(h[6])
            .ok_or_else(|| Error::Protocol(format!("unknown message kind {}", h[6])))?;
        let mut sid = [0u8; 16];
        sid.copy_from_slice(&h[7..23]);
        let seq = u64::from_le_bytes(h[23..31].try_into().unwrap());
        let len = u32::from_le_bytes(h[31..35].try_into().unwrap()) as usize;
        Ok((kind, sid, seq, len))
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let (kind, session_id, seq, len) = Frame::decode_header(bytes)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len {
            return Err(Error::Protocol(format!(
                "payload length {} does not match prefix {len}",
                body.len()
            )));
        }
        Ok(Frame {
            kind,
            session_id,
            seq,
            payload: body.to_vec(),
        })
    }
}

/// A decoded matrix payload.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixPayload {
    Ring(FxMatrix),
    Real(Tensor),
}

pub fn encode_ring(m: &FxMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 8 * m.data().len());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.push(0);
    for e in m.data() {
        out.extend_from_slice(&e.0.to_le_bytes());
    }
    out
}

pub fn encode_real(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 8 * t.len());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    out.push(1);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(p: &[u8]) -> Result<MatrixPayload> {
    if p.len() < MATRIX_HEADER_LEN {
        return Err(Error::Protocol("truncated matrix header".into()));
    }
    let rows = u32::from_le_bytes(p[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(p[4..8].try_into().unwrap()) as usize;
    let elems = &p[MATRIX_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Protocol("matrix dimensions overflow".into()))?;
    if elems.len() != expected {
        return Err(Error::Protocol(format!(
            "matrix {rows}x{cols} needs {expected} bytes, got {}",
            elems.len()
        )));
    }
    let words = elems.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
    match p[8] {
        0 => Ok(MatrixPayload::Ring(FxMatrix::from_raw(
            rows,
            cols,
            words.map(RingElem).collect(),
        )?)),
        1 => Ok(MatrixPayload::Real(Tensor::from_vec(
            rows,
            cols,
            words.map(f64::from_bits).collect(),
        )?)),
        k => Err(Error::Protocol(format!("unknown element kind {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = Frame {
            kind: MessageKind::Gradient,
            session_id: [7; 16],
            seq: 0x0102030405060708,
            payload: vec![0xaa, 0xbb],
        };
        let b = f.encode();
        assert_eq!(&b[0..4], b"P2N2");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 4);
        assert_eq!(&b[7..23], &[7; 16]);
        assert_eq!(&b[23..31], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&b[31..35], &[2, 0, 0, 0]);
        assert_eq!(&b[35..], &[0xaa, 0xbb]);
        assert_eq!(Frame::decode(&b).unwrap(), f);
    }

    #[test]
    fn matrix_layout() {
        let t = Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode_real(&t);
        assert_eq!(&b[0..9], &[1, 0, 0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(&b[9..17], &1.0f64.to_le_bytes());
        let m = FxMatrix::from_u64(1, 1, vec![u64::MAX]).unwrap();
        let b = encode_ring(&m);
        assert_eq!(b[8], 0);
        assert_eq!(decode_matrix(&b).unwrap(), MatrixPayload::Ring(m));
    }

    #[test]
    fn rejects_corruption() {
        let f = Frame {
            kind: MessageKind::Hello,
            session_id: [0; 16],
            seq: 0,
            payload: vec![1, 2, 3],
        };
        let b = f.encode();
        assert!(Frame::decode(&b[..b.len() - 1]).is_err());
        assert!(Frame::decode(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Frame::decode(&bad).is_err());
        let mut bad = b.clone();
        bad[6] = 99;
        assert!(Frame::decode(&bad).is_err());
        let m = encode_ring(&FxMatrix::zeros(2, 2));
        assert!(decode_matrix(&m[..m.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn ring_matrix_round_trip(rows in 1usize..6, cols in 1usize..6, words in proptest::collection::vec(any::<u64>(), 36)) {
            let m = FxMatrix::from_u64(rows, cols, words[..rows * cols].to_vec()).unwrap();
            let frame = Frame { kind: MessageKind::ShareBlock, session_id: [3; 16], seq: 9, payload: encode_ring(&m) };
            let back = Frame::decode(&frame.encode()).unwrap();
            prop_assert_eq!(decode_matrix(&back.payload).unwrap(), MatrixPayload::Ring(m));
        }
    }
}
