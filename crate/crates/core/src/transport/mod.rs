//! Wire format and timing model shared by the simulator and the TCP backend.

pub mod frame;
pub mod latency;
pub mod stream;

pub use frame::{decode_frame, encode_frame, FrameDecoder, FrameError};
pub use latency::LatencyModel;
