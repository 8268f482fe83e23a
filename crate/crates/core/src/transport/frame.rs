//! Length-prefixed little-endian framing.
//!
//! ```text
//! u32 length | u16 kind | u64 page | u16 src | u64 seq | payload
//!            \___________________ body ____________________/
//! ```
//!
//! `length` counts body bytes only. The fixed body header is 20 bytes.

use thiserror::Error;

use crate::geometry::NodeId;
use crate::message::{KindTag, Message, MsgKind};

pub const LEN_PREFIX: usize = 4;
pub const HEADER_LEN: usize = 2 + 8 + 2 + 8;
/// Upper bound on a body; pages larger than this cannot be framed.
pub const MAX_BODY: usize = HEADER_LEN + (256 << 20);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("unknown kind tag {0:#06x}")]
    UnknownKind(u16),
    #[error("body length {0} outside [{HEADER_LEN}, {MAX_BODY}]")]
    BadLength(usize),
    #[error("malformed payload for {kind}: {len} bytes")]
    BadPayload { kind: KindTag, len: usize },
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEN_PREFIX + HEADER_LEN + msg.payload_len());
    encode_into(msg, &mut out);
    out
}

pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; LEN_PREFIX]);
    out.extend_from_slice(&(msg.kind.tag() as u16).to_le_bytes());
    out.extend_from_slice(&msg.page.to_le_bytes());
    out.extend_from_slice(&msg.src.to_wire().to_le_bytes());
    out.extend_from_slice(&msg.seq.to_le_bytes());
    match &msg.kind {
        MsgKind::PageData(b)
        | MsgKind::WriteGrant(b)
        | MsgKind::PrivilegeTransfer(b)
        | MsgKind::Writeback(b) => out.extend_from_slice(b),
        MsgKind::Redirect { target, write } => {
            out.extend_from_slice(&target.to_wire().to_le_bytes());
            out.push(u8::from(*write));
        }
        MsgKind::HandoffReq { on_behalf: Some(n) } => {
            out.extend_from_slice(&n.to_wire().to_le_bytes())
        }
        MsgKind::TransferNotice { new_writer } => {
            out.extend_from_slice(&new_writer.to_wire().to_le_bytes())
        }
        MsgKind::BarrierEnter { expected } => out.extend_from_slice(&expected.to_le_bytes()),
        MsgKind::BarrierRelease { epoch } => out.extend_from_slice(&epoch.to_le_bytes()),
        _ => {}
    }
    let body_len = (out.len() - start - LEN_PREFIX) as u32;
    out[start..start + LEN_PREFIX].copy_from_slice(&body_len.to_le_bytes());
}

/// Decodes one frame from the front of `buf`, returning the message and the
/// number of bytes it occupied. Never reads past a complete frame.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), FrameError> {
    if buf.len() < LEN_PREFIX {
        return Err(FrameError::Truncated {
            have: buf.len(),
            need: LEN_PREFIX,
        });
    }
    let body_len = u32::from_le_bytes(buf[..LEN_PREFIX].try_into().unwrap()) as usize;
    if !(HEADER_LEN..=MAX_BODY).contains(&body_len) {
        return Err(FrameError::BadLength(body_len));
    }
    let total = LEN_PREFIX + body_len;
    if buf.len() < total {
        return Err(FrameError::Truncated {
            have: buf.len(),
            need: total,
        });
    }
    let msg = decode_body(&buf[LEN_PREFIX..total])?;
    Ok((msg, total))
}

pub fn decode_body(body: &[u8]) -> Result<Message, FrameError> {
    if body.len() < HEADER_LEN {
        return Err(FrameError::BadLength(body.len()));
    }
    let raw_kind = u16::from_le_bytes([body[0], body[1]]);
    let tag = KindTag::from_u16(raw_kind).ok_or(FrameError::UnknownKind(raw_kind))?;
    let page = u64::from_le_bytes(body[2..10].try_into().unwrap());
    let src = NodeId::from_wire(u16::from_le_bytes([body[10], body[11]]));
    let seq = u64::from_le_bytes(body[12..20].try_into().unwrap());
    let payload = &body[HEADER_LEN..];
    let bad = || FrameError::BadPayload {
        kind: tag,
        len: payload.len(),
    };
    let node_at = |p: &[u8]| NodeId::from_wire(u16::from_le_bytes([p[0], p[1]]));
    let kind = match tag {
        KindTag::PageData => MsgKind::PageData(payload.to_vec()),
        KindTag::WriteGrant => MsgKind::WriteGrant(payload.to_vec()),
        KindTag::PrivilegeTransfer => MsgKind::PrivilegeTransfer(payload.to_vec()),
        KindTag::Writeback => MsgKind::Writeback(payload.to_vec()),
        KindTag::Redirect => {
            if payload.len() != 3 || payload[2] > 1 {
                return Err(bad());
            }
            MsgKind::Redirect {
                target: node_at(payload),
                write: payload[2] == 1,
            }
        }
        KindTag::HandoffReq => match payload.len() {
            0 => MsgKind::HandoffReq { on_behalf: None },
            2 => MsgKind::HandoffReq {
                on_behalf: Some(node_at(payload)),
            },
            _ => return Err(bad()),
        },
        KindTag::TransferNotice => {
            if payload.len() != 2 {
                return Err(bad());
            }
            MsgKind::TransferNotice {
                new_writer: node_at(payload),
            }
        }
        KindTag::BarrierEnter => {
            let raw: [u8; 4] = payload.try_into().map_err(|_| bad())?;
            MsgKind::BarrierEnter {
                expected: u32::from_le_bytes(raw),
            }
        }
        KindTag::BarrierRelease => {
            let raw: [u8; 8] = payload.try_into().map_err(|_| bad())?;
            MsgKind::BarrierRelease {
                epoch: u64::from_le_bytes(raw),
            }
        }
        fieldless => {
            if !payload.is_empty() {
                return Err(bad());
            }
            match fieldless {
                KindTag::ReadReq => MsgKind::ReadReq,
                KindTag::WriteReq => MsgKind::WriteReq,
                KindTag::Invalidate => MsgKind::Invalidate,
                KindTag::InvalidateAck => MsgKind::InvalidateAck,
                KindTag::CopyReq => MsgKind::CopyReq,
                KindTag::WritebackAck => MsgKind::WritebackAck,
                KindTag::LockReq => MsgKind::LockReq,
                KindTag::LockGrant => MsgKind::LockGrant,
                KindTag::LockRelease => MsgKind::LockRelease,
                KindTag::Downgrade => MsgKind::Downgrade,
                KindTag::ReaderDrop => MsgKind::ReaderDrop,
                KindTag::Nack => MsgKind::Nack,
                _ => unreachable!("payload kinds handled above"),
            }
        }
    };
    Ok(Message {
        kind,
        page,
        src,
        seq,
    })
}

/// Accumulates stream bytes and yields whole frames. Partial frames stay
/// buffered untouched until the rest arrives.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` when the buffered bytes do not yet hold a full frame.
    pub fn next_frame(&mut self) -> Result<Option<Message>, FrameError> {
        match decode_frame(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(FrameError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MsgKind) -> Message {
        Message {
            kind,
            page: 5,
            src: NodeId::compute(1),
            seq: 7,
        }
    }

    #[test]
    fn invalidate_is_a_bare_header() {
        let bytes = encode_frame(&msg(MsgKind::Invalidate));
        assert_eq!(bytes.len(), 4 + 20);
        assert_eq!(&bytes[..4], &20u32.to_le_bytes());
        assert_eq!(&bytes[4..6], &(KindTag::Invalidate as u16).to_le_bytes());
        assert_eq!(&bytes[6..14], &5u64.to_le_bytes());
        assert_eq!(&bytes[14..16], &0x8001u16.to_le_bytes());
        assert_eq!(&bytes[16..24], &7u64.to_le_bytes());
        let (back, used) = decode_frame(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, msg(MsgKind::Invalidate));
    }

    #[test]
    fn page_data_length_field() {
        let m = msg(MsgKind::PageData(vec![0xab; 4096]));
        let bytes = encode_frame(&m);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()), 20 + 4096);
        assert_eq!(decode_frame(&bytes).unwrap().0, m);
    }

    #[test]
    fn unknown_tag_rejected() {
        let mut bytes = encode_frame(&msg(MsgKind::ReadReq));
        bytes[4..6].copy_from_slice(&0xffffu16.to_le_bytes());
        assert_eq!(decode_frame(&bytes), Err(FrameError::UnknownKind(0xffff)));
    }

    #[test]
    fn stray_payload_rejected() {
        let mut bytes = encode_frame(&msg(MsgKind::ReadReq));
        bytes.push(1);
        bytes[..4].copy_from_slice(&21u32.to_le_bytes());
        assert!(matches!(decode_frame(&bytes), Err(FrameError::BadPayload { .. })));
    }

    #[test]
    fn decoder_holds_partial_frames() {
        let a = encode_frame(&msg(MsgKind::WriteGrant(vec![1; 64])));
        let b = encode_frame(&msg(MsgKind::LockGrant));
        let mut d = FrameDecoder::new();
        d.extend(&a[..10]);
        assert_eq!(d.next_frame().unwrap(), None);
        assert_eq!(d.buffered(), 10);
        d.extend(&a[10..]);
        d.extend(&b[..3]);
        assert!(matches!(d.next_frame().unwrap().unwrap().kind, MsgKind::WriteGrant(_)));
        assert_eq!(d.next_frame().unwrap(), None);
        d.extend(&b[3..]);
        assert_eq!(d.next_frame().unwrap().unwrap().kind, MsgKind::LockGrant);
        assert_eq!(d.buffered(), 0);
    }
}
