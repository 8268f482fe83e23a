use thiserror::Error;

use crate::geometry::NodeId;

/// Errors surfaced by the engine, the harness and the benchmark driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("address range [{addr}, {addr}+{len}) outside global address space of {gas_size} bytes")]
    Address { addr: u64, len: u64, gas_size: u64 },
    #[error("protocol violation at {node}: {detail}")]
    Protocol { node: NodeId, detail: String },
    #[error("lock {lock_id}: {detail}")]
    Lock { lock_id: u64, detail: String },
    #[error("allocation failed: {0}")]
    Alloc(String),
    #[error("region access denied: {0}")]
    Access(String),
    #[error("could not reach {0}")]
    Connect(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Frame(#[from] crate::transport::frame::FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("oracle: {0}")]
    Oracle(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn protocol_err(node: NodeId, detail: impl Into<String>) -> Error {
    Error::Protocol {
        node,
        detail: detail.into(),
    }
}
