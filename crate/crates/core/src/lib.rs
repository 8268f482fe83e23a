//! Page-based distributed shared memory over a partitioned global address
//! space, kept coherent by a time-slice write-invalidate protocol.
//!
//! Memory servers own pages and directories; compute nodes cache pages and
//! run application code. The protocol engines are sans-IO and run under
//! either the deterministic simulator ([`sim`]) or the TCP backend
//! ([`transport::stream`]).

pub mod api;
pub mod bench;
pub mod clock;
pub mod directory;
pub mod error;
pub mod geometry;
pub mod message;
pub mod protocol;
pub mod sim;
pub mod sync;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::{GasConfig, NodeId, PageId, Role};
pub use message::{KindTag, Message, MsgKind};
