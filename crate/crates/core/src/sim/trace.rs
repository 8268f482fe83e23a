//! Message trace log: one tab-separated line per delivered message.
//!
//! ```text
//! time  src  dst  kind  page  seq  sent  bytes  arg
//! ```
//!
//! The first six columns are the core record; `sent` is the send instant,
//! `bytes` the page payload size and `arg` a kind-specific value (`-` when
//! absent). Lines starting with `#` carry run parameters the checker needs.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::clock::ClockSkew;
use crate::error::{Error, Result};
use crate::geometry::NodeId;
use crate::message::{KindTag, Message};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    /// Global delivery time in ns.
    pub time: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: KindTag,
    pub page: u64,
    pub seq: u64,
    pub sent: u64,
    pub bytes: usize,
    pub arg: Option<String>,
}

impl TraceEvent {
    pub fn delivered(msg: &Message, dst: NodeId, sent: u64, time: u64) -> Self {
        Self {
            time,
            src: msg.src,
            dst,
            kind: msg.kind.tag(),
            page: msg.page,
            seq: msg.seq,
            sent,
            bytes: msg.payload_len(),
            arg: msg.kind.trace_arg(),
        }
    }

    /// The `arg` column read as a node id.
    pub fn arg_node(&self) -> Option<NodeId> {
        self.arg.as_deref().and_then(|a| a.trim_end_matches("/w").parse().ok())
    }

    pub fn arg_u64(&self) -> Option<u64> {
        self.arg.as_deref().and_then(|a| a.parse().ok())
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.time,
            self.src,
            self.dst,
            self.kind,
            self.page,
            self.seq,
            self.sent,
            self.bytes,
            self.arg.as_deref().unwrap_or("-")
        )
    }
}

impl FromStr for TraceEvent {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("trace line {line:?}: bad {what}"));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 && cols.len() != 9 {
            return Err(bad("column count"));
        }
        let num = |i: usize, what: &str| cols[i].parse::<u64>().map_err(|_| bad(what));
        let time = num(0, "time")?;
        let (sent, bytes, arg) = if cols.len() == 9 {
            let arg = (cols[8] != "-").then(|| cols[8].to_string());
            (num(6, "sent")?, num(7, "bytes")? as usize, arg)
        } else {
            (time, 0, None)
        };
        Ok(Self {
            time,
            src: cols[1].parse().map_err(|_| bad("src"))?,
            dst: cols[2].parse().map_err(|_| bad("dst"))?,
            kind: cols[3].parse().map_err(|_| bad("kind"))?,
            page: num(4, "page")?,
            seq: num(5, "seq")?,
            sent,
            bytes,
            arg,
        })
    }
}

/// A full run log plus the parameters needed to check it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub slice_ns: i64,
    /// Clock of each compute node that is not the identity.
    pub skews: Vec<(NodeId, ClockSkew)>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn skew_of(&self, node: NodeId) -> ClockSkew {
        self.skews
            .iter()
            .find(|(n, _)| *n == node)
            .map(|(_, s)| *s)
            .unwrap_or_default()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# slice_ns {}", self.slice_ns);
        for (n, k) in &self.skews {
            let _ = writeln!(s, "# skew {n} {} {}", k.offset_ns, k.drift);
        }
        for e in &self.events {
            let _ = writeln!(s, "{e}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Trace::default();
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let words: Vec<&str> = rest.split_whitespace().collect();
                let bad = || Error::Config(format!("trace header {line:?}"));
                match words.as_slice() {
                    ["slice_ns", v] => t.slice_ns = v.parse().map_err(|_| bad())?,
                    ["skew", n, off, drift] => t.skews.push((
                        n.parse().map_err(|_| bad())?,
                        ClockSkew::new(off.parse().map_err(|_| bad())?, drift.parse().map_err(|_| bad())?),
                    )),
                    _ => {}
                }
                continue;
            }
            t.events.push(line.parse()?);
        }
        Ok(t)
    }

    /// Stable 64-bit FNV-1a digest of the rendered trace.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.render().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn count(&self, kind: KindTag) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn kinds(&self) -> Vec<KindTag> {
        self.events.iter().map(|e| e.kind).collect()
    }
}
