//! Address-space geometry and node identity.
//!
//! The global address space (GAS) is a flat byte range split into fixed-size
//! pages. Every page has a static owner memory server chosen round-robin by
//! page index.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;

/// Cluster-wide geometry. Immutable once validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GasConfig {
    pub gas_size: u64,
    pub page_size: u64,
    /// Per compute node.
    pub cache_size: u64,
    pub num_servers: u16,
    pub num_computes: u16,
    /// Write time slice, measured on the holder's local clock.
    pub slice_len: Duration,
}

impl Default for GasConfig {
    fn default() -> Self {
        Self {
            gas_size: 16 * MIB,
            page_size: 4 * KIB,
            cache_size: 2 * MIB,
            num_servers: 2,
            num_computes: 4,
            slice_len: Duration::from_millis(10),
        }
    }
}

impl GasConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.page_size.is_power_of_two() {
            return bad("page_size must be a power of two");
        }
        if !self.cache_size.is_power_of_two() {
            return bad("cache_size must be a power of two");
        }
        if self.gas_size == 0 || !self.gas_size.is_multiple_of(self.page_size) {
            return bad("page_size must divide gas_size");
        }
        if self.cache_size < self.page_size || !self.cache_size.is_multiple_of(self.page_size) {
            return bad("cache_size must be a multiple of page_size");
        }
        if self.num_servers == 0 || self.num_computes == 0 {
            return bad("need at least one server and one compute node");
        }
        if self.num_servers > MAX_ROLE_INDEX || self.num_computes > MAX_ROLE_INDEX {
            return bad("too many nodes for 15-bit node indices");
        }
        if self.slice_len.is_zero() {
            return bad("slice_len must be positive");
        }
        Ok(())
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn num_pages(&self) -> u64 {
        self.gas_size / self.page_size
    }

    pub fn cache_frames(&self) -> usize {
        (self.cache_size / self.page_size) as usize
    }

    pub fn slice_ns(&self) -> i64 {
        self.slice_len.as_nanos() as i64
    }

    pub fn page_of(&self, addr: u64) -> Result<PageId> {
        if addr >= self.gas_size {
            return Err(Error::Address {
                addr,
                len: 1,
                gas_size: self.gas_size,
            });
        }
        Ok(PageId(addr / self.page_size))
    }

    /// `(start address, length)` of a page.
    pub fn page_range(&self, page: PageId) -> (u64, u64) {
        (page.0 * self.page_size, self.page_size)
    }

    pub fn owner_of(&self, page: PageId) -> NodeId {
        owner_of(page, self.num_servers)
    }

    pub fn check_page(&self, page: PageId) -> Result<()> {
        if page.0 >= self.num_pages() {
            return Err(Error::Address {
                addr: page.0.saturating_mul(self.page_size),
                len: self.page_size,
                gas_size: self.gas_size,
            });
        }
        Ok(())
    }

    pub fn check_range(&self, addr: u64, len: u64) -> Result<()> {
        match addr.checked_add(len) {
            Some(end) if end <= self.gas_size => Ok(()),
            _ => Err(Error::Address {
                addr,
                len,
                gas_size: self.gas_size,
            }),
        }
    }

    pub fn servers(&self) -> impl Iterator<Item = NodeId> {
        (0..self.num_servers).map(NodeId::server)
    }

    pub fn computes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.num_computes).map(NodeId::compute)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        match node.role {
            Role::Server => node.index < self.num_servers,
            Role::Compute => node.index < self.num_computes,
        }
    }

    /// Parses `key=value` lines. Unknown keys are rejected; `#` starts a comment.
    pub fn parse_kv(text: &str, base: GasConfig) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let wrap = |e: Error| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            match key {
                "gas_size" => cfg.gas_size = parse_size(value).map_err(wrap)?,
                "page_size" => cfg.page_size = parse_size(value).map_err(wrap)?,
                "cache_size" => cfg.cache_size = parse_size(value).map_err(wrap)?,
                "servers" | "num_servers" => {
                    cfg.num_servers = parse_count(value).map_err(wrap)?
                }
                "computes" | "num_computes" => {
                    cfg.num_computes = parse_count(value).map_err(wrap)?
                }
                "slice" | "slice_len" => cfg.slice_len = parse_duration(value).map_err(wrap)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validated()
    }

    pub fn load(path: &Path, base: GasConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_kv(&text, base)
    }
}

fn parse_count(s: &str) -> Result<u16> {
    s.parse()
        .map_err(|_| Error::Config(format!("not a count: `{s}`")))
}

/// Parses byte sizes such as `4096`, `4K`, `16M`, `1G` (binary multiples).
pub fn parse_size(s: &str) -> Result<u64> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let mult = match c.to_ascii_uppercase() {
                'K' => KIB,
                'M' => MIB,
                'G' => 1 << 30,
                'B' => 1,
                _ => return Err(Error::Config(format!("bad size suffix in `{s}`"))),
            };
            (&s[..i], mult)
        }
        _ => (s, 1),
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("not a size: `{s}`")))?;
    n.checked_mul(mult)
        .ok_or_else(|| Error::Config(format!("size overflow: `{s}`")))
}

pub fn format_size(n: u64) -> String {
    if n >= MIB && n.is_multiple_of(MIB) {
        format!("{}M", n / MIB)
    } else if n >= KIB && n.is_multiple_of(KIB) {
        format!("{}K", n / KIB)
    } else {
        n.to_string()
    }
}

/// Parses `10ms`, `250us`, `3s`, `500ns`. A bare number is milliseconds.
pub fn parse_duration(s: &str) -> Result<Duration> {
    let s = s.trim();
    let split = s
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num
        .parse()
        .map_err(|_| Error::Config(format!("not a duration: `{s}`")))?;
    Ok(match unit.trim() {
        "" | "ms" => Duration::from_millis(n),
        "us" | "µs" => Duration::from_micros(n),
        "ns" => Duration::from_nanos(n),
        "s" => Duration::from_secs(n),
        u => return Err(Error::Config(format!("unknown duration unit `{u}`"))),
    })
}

pub const MAX_ROLE_INDEX: u16 = 0x7fff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Server,
    Compute,
}

/// A memory server or compute node, by ordinal within its role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub role: Role,
    pub index: u16,
}

impl NodeId {
    pub const fn server(index: u16) -> Self {
        Self {
            role: Role::Server,
            index,
        }
    }

    pub const fn compute(index: u16) -> Self {
        Self {
            role: Role::Compute,
            index,
        }
    }

    pub fn is_server(self) -> bool {
        self.role == Role::Server
    }

    pub fn is_compute(self) -> bool {
        self.role == Role::Compute
    }

    /// Wire form: high bit set for compute nodes.
    pub fn to_wire(self) -> u16 {
        match self.role {
            Role::Server => self.index,
            Role::Compute => 0x8000 | self.index,
        }
    }

    pub fn from_wire(raw: u16) -> Self {
        if raw & 0x8000 != 0 {
            Self::compute(raw & 0x7fff)
        } else {
            Self::server(raw)
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.role {
            Role::Server => 's',
            Role::Compute => 'c',
        };
        write!(f, "{c}{}", self.index)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad node id `{s}` (expected s<N> or c<N>)"));
        let mut chars = s.chars();
        let role = match chars.next() {
            Some('s') => Role::Server,
            Some('c') => Role::Compute,
            _ => return Err(bad()),
        };
        let index: u16 = chars.as_str().parse().map_err(|_| bad())?;
        if index > MAX_ROLE_INDEX {
            return Err(bad());
        }
        Ok(Self { role, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(pub u64);

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Round-robin placement: `page mod num_servers`.
pub fn owner_of(page: PageId, num_servers: u16) -> NodeId {
    NodeId::server((page.0 % u64::from(num_servers)) as u16)
}
