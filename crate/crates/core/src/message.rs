//! Protocol vocabulary shared by servers, compute nodes, the sync managers
//! and both transports.

use std::fmt;
use std::str::FromStr;

use crate::geometry::NodeId;

/// Message body. Byte-carrying variants hold exactly one page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MsgKind {
    ReadReq,
    WriteReq,
    /// Read grant with page contents.
    PageData(Vec<u8>),
    WriteGrant(Vec<u8>),
    /// Go ask `target`; `write` marks a writer-to-writer handoff redirect.
    Redirect { target: NodeId, write: bool },
    Invalidate,
    InvalidateAck,
    /// Reader asking the holder for the current copy.
    CopyReq,
    /// Writer asking the holder to hand over write privilege. When sent by the
    /// owner server, `on_behalf` names the node that receives the privilege.
    HandoffReq { on_behalf: Option<NodeId> },
    PrivilegeTransfer(Vec<u8>),
    TransferNotice { new_writer: NodeId },
    Writeback(Vec<u8>),
    WritebackAck,
    BarrierEnter { expected: u32 },
    BarrierRelease { epoch: u64 },
    LockReq,
    LockGrant,
    LockRelease,
    /// Writer served a copy request and now holds the latest copy read-only.
    Downgrade,
    /// A clean read copy was dropped.
    ReaderDrop,
    /// The addressee no longer holds the page; retry at the owner server.
    Nack,
}

/// Fieldless discriminant, used for wire tags and trace lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum KindTag {
    ReadReq = 0,
    WriteReq = 1,
    PageData = 2,
    WriteGrant = 3,
    Redirect = 4,
    Invalidate = 5,
    InvalidateAck = 6,
    CopyReq = 7,
    HandoffReq = 8,
    PrivilegeTransfer = 9,
    TransferNotice = 10,
    Writeback = 11,
    WritebackAck = 12,
    BarrierEnter = 13,
    BarrierRelease = 14,
    LockReq = 15,
    LockGrant = 16,
    LockRelease = 17,
    Downgrade = 18,
    ReaderDrop = 19,
    Nack = 20,
}

impl KindTag {
    pub const ALL: [KindTag; 21] = [
        KindTag::ReadReq,
        KindTag::WriteReq,
        KindTag::PageData,
        KindTag::WriteGrant,
        KindTag::Redirect,
        KindTag::Invalidate,
        KindTag::InvalidateAck,
        KindTag::CopyReq,
        KindTag::HandoffReq,
        KindTag::PrivilegeTransfer,
        KindTag::TransferNotice,
        KindTag::Writeback,
        KindTag::WritebackAck,
        KindTag::BarrierEnter,
        KindTag::BarrierRelease,
        KindTag::LockReq,
        KindTag::LockGrant,
        KindTag::LockRelease,
        KindTag::Downgrade,
        KindTag::ReaderDrop,
        KindTag::Nack,
    ];

    pub fn from_u16(raw: u16) -> Option<Self> {
        Self::ALL.get(raw as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            KindTag::ReadReq => "ReadReq",
            KindTag::WriteReq => "WriteReq",
            KindTag::PageData => "PageData",
            KindTag::WriteGrant => "WriteGrant",
            KindTag::Redirect => "Redirect",
            KindTag::Invalidate => "Invalidate",
            KindTag::InvalidateAck => "InvalidateAck",
            KindTag::CopyReq => "CopyReq",
            KindTag::HandoffReq => "HandoffReq",
            KindTag::PrivilegeTransfer => "PrivilegeTransfer",
            KindTag::TransferNotice => "TransferNotice",
            KindTag::Writeback => "Writeback",
            KindTag::WritebackAck => "WritebackAck",
            KindTag::BarrierEnter => "BarrierEnter",
            KindTag::BarrierRelease => "BarrierRelease",
            KindTag::LockReq => "LockReq",
            KindTag::LockGrant => "LockGrant",
            KindTag::LockRelease => "LockRelease",
            KindTag::Downgrade => "Downgrade",
            KindTag::ReaderDrop => "ReaderDrop",
            KindTag::Nack => "Nack",
        }
    }

    pub fn carries_page(self) -> bool {
        matches!(
            self,
            KindTag::PageData | KindTag::WriteGrant | KindTag::PrivilegeTransfer | KindTag::Writeback
        )
    }

    pub fn is_sync(self) -> bool {
        matches!(
            self,
            KindTag::BarrierEnter
                | KindTag::BarrierRelease
                | KindTag::LockReq
                | KindTag::LockGrant
                | KindTag::LockRelease
        )
    }
}

impl fmt::Display for KindTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KindTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown message kind `{s}`"))
    }
}

impl MsgKind {
    pub fn tag(&self) -> KindTag {
        match self {
            MsgKind::ReadReq => KindTag::ReadReq,
            MsgKind::WriteReq => KindTag::WriteReq,
            MsgKind::PageData(_) => KindTag::PageData,
            MsgKind::WriteGrant(_) => KindTag::WriteGrant,
            MsgKind::Redirect { .. } => KindTag::Redirect,
            MsgKind::Invalidate => KindTag::Invalidate,
            MsgKind::InvalidateAck => KindTag::InvalidateAck,
            MsgKind::CopyReq => KindTag::CopyReq,
            MsgKind::HandoffReq { .. } => KindTag::HandoffReq,
            MsgKind::PrivilegeTransfer(_) => KindTag::PrivilegeTransfer,
            MsgKind::TransferNotice { .. } => KindTag::TransferNotice,
            MsgKind::Writeback(_) => KindTag::Writeback,
            MsgKind::WritebackAck => KindTag::WritebackAck,
            MsgKind::BarrierEnter { .. } => KindTag::BarrierEnter,
            MsgKind::BarrierRelease { .. } => KindTag::BarrierRelease,
            MsgKind::LockReq => KindTag::LockReq,
            MsgKind::LockGrant => KindTag::LockGrant,
            MsgKind::LockRelease => KindTag::LockRelease,
            MsgKind::Downgrade => KindTag::Downgrade,
            MsgKind::ReaderDrop => KindTag::ReaderDrop,
            MsgKind::Nack => KindTag::Nack,
        }
    }

    pub fn page_bytes(&self) -> Option<&[u8]> {
        match self {
            MsgKind::PageData(b)
            | MsgKind::WriteGrant(b)
            | MsgKind::PrivilegeTransfer(b)
            | MsgKind::Writeback(b) => Some(b),
            _ => None,
        }
    }

    /// Kind-specific argument shown in the trace's last column.
    pub fn trace_arg(&self) -> Option<String> {
        match self {
            MsgKind::Redirect { target, write } => {
                Some(format!("{target}{}", if *write { "/w" } else { "" }))
            }
            MsgKind::HandoffReq { on_behalf: Some(n) } => Some(n.to_string()),
            MsgKind::TransferNotice { new_writer } => Some(new_writer.to_string()),
            MsgKind::BarrierEnter { expected } => Some(expected.to_string()),
            MsgKind::BarrierRelease { epoch } => Some(epoch.to_string()),
            _ => None,
        }
    }
}

/// A protocol datagram. For sync kinds `page` carries the lock or barrier id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MsgKind,
    pub page: u64,
    pub src: NodeId,
    /// Per-sender monotone counter.
    pub seq: u64,
}

impl Message {
    pub fn payload_len(&self) -> usize {
        self.kind.page_bytes().map_or(0, <[u8]>::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_are_dense_and_named() {
        for (i, k) in KindTag::ALL.iter().enumerate() {
            assert_eq!(*k as u16 as usize, i);
            assert_eq!(KindTag::from_u16(i as u16), Some(*k));
            assert_eq!(k.name().parse::<KindTag>().unwrap(), *k);
        }
        assert_eq!(KindTag::from_u16(0xffff), None);
    }
}
