//! The time-slice write-invalidate protocol as two sans-IO state machines.
//!
//! Handlers consume one message (or timer, or application step) and return
//! the messages to send. Transports own delivery and time.

pub mod compute;
pub mod server;

pub use compute::{AppCall, CallOutcome, CachedPage, ComputeNode, Output, Privilege};
pub use server::{ServerNode, ServerPageView};

use crate::geometry::NodeId;
use crate::message::{Message, MsgKind};

/// A message bound for `dst`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub dst: NodeId,
    pub msg: Message,
}

/// Stamps outgoing messages with the sender id and its sequence counter.
#[derive(Debug, Clone)]
pub(crate) struct Stamp {
    id: NodeId,
    next_seq: u64,
}

impl Stamp {
    pub(crate) fn new(id: NodeId) -> Self {
        Self { id, next_seq: 0 }
    }

    pub(crate) fn make(&mut self, dst: NodeId, page: u64, kind: MsgKind) -> Envelope {
        let seq = self.next_seq;
        self.next_seq += 1;
        Envelope {
            dst,
            msg: Message {
                kind,
                page,
                src: self.id,
                seq,
            },
        }
    }
}
