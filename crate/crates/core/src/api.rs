//! Application-facing sessions: explicit read/write on the global address
//! space, locks, barriers, and exclusive remote-paging regions.
//!
//! ```
//! use dsm_core::api::{Dsm, SimDsm};
//! use dsm_core::sim::SimConfig;
//! use dsm_core::GasConfig;
//!
//! let mut dsm = SimDsm::map(SimConfig::new(GasConfig::default()), 0).unwrap();
//! let mut s = dsm.session(0).unwrap();
//! s.write(4096, b"hello").unwrap();
//! assert_eq!(s.read(4096, 5).unwrap(), b"hello");
//! ```

use crate::error::{Error, Result};
use crate::geometry::{GasConfig, NodeId};
use crate::protocol::{AppCall, CallOutcome};
use crate::sim::{Cluster, SimConfig};
use crate::transport::stream::StreamCompute;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMode {
    Shared,
    RemotePaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsmRegion {
    pub base: u64,
    pub len: u64,
    pub mode: RegionMode,
}

impl DsmRegion {
    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    fn overlaps(&self, addr: u64, len: u64) -> bool {
        len > 0 && addr < self.end() && self.base < addr + len
    }
}

/// Bump allocator handing out paging regions from the top of the address
/// space down to the end of the shared area.
#[derive(Debug, Clone)]
pub struct PagingAllocator {
    page_size: u64,
    shared_end: u64,
    top: u64,
    owned: Vec<(DsmRegion, NodeId)>,
}

impl PagingAllocator {
    /// `[0, shared_len)` stays shared; paging regions come from above it.
    pub fn new(gas: &GasConfig, shared_len: u64) -> Self {
        Self {
            page_size: gas.page_size,
            shared_end: shared_len.min(gas.gas_size),
            top: gas.gas_size,
            owned: Vec::new(),
        }
    }

    pub fn alloc(&mut self, owner: NodeId, len: u64) -> Result<DsmRegion> {
        if len == 0 {
            return Err(Error::Alloc("zero-length region".into()));
        }
        let rounded = len
            .checked_next_multiple_of(self.page_size)
            .ok_or_else(|| Error::Alloc(format!("{len} bytes")))?;
        let room = self.top - self.shared_end;
        if rounded > room {
            return Err(Error::Alloc(format!("{len} bytes requested, {room} left for paging")));
        }
        self.top -= rounded;
        let r = DsmRegion {
            base: self.top,
            len: rounded,
            mode: RegionMode::RemotePaging,
        };
        self.owned.push((r, owner));
        Ok(r)
    }

    /// Rejects accesses by `node` that touch another node's paging region.
    pub fn check_access(&self, node: NodeId, addr: u64, len: u64) -> Result<()> {
        match self.owned.iter().find(|(r, o)| *o != node && r.overlaps(addr, len)) {
            Some((r, o)) => Err(Error::Access(format!(
                "{node} touched [{}, {}) owned by {o}",
                r.base,
                r.end()
            ))),
            None => Ok(()),
        }
    }

    pub fn regions(&self) -> impl Iterator<Item = &(DsmRegion, NodeId)> {
        self.owned.iter()
    }
}

/// One compute node's view of the global address space. Calls are
/// serialized: each returns once its access has completed.
pub trait Dsm {
    fn node(&self) -> NodeId;
    fn config(&self) -> &GasConfig;
    fn call(&mut self, call: AppCall) -> Result<CallOutcome>;
    fn paging_alloc(&mut self, len: u64) -> Result<DsmRegion>;
    /// Ownership check for paging regions; shared space is open to all.
    fn check_access(&self, addr: u64, len: u64) -> Result<()>;

    fn read(&mut self, addr: u64, len: u64) -> Result<Vec<u8>> {
        self.check_access(addr, len)?;
        match self.call(AppCall::Read { addr, len })? {
            CallOutcome::Read(b) => Ok(b),
            other => Err(unexpected(other)),
        }
    }

    fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        self.check_access(addr, bytes.len() as u64)?;
        self.call(AppCall::Write {
            addr,
            bytes: bytes.to_vec(),
        })
        .map(|_| ())
    }

    fn fetch_add(&mut self, addr: u64, delta: u64) -> Result<u64> {
        self.check_access(addr, 8)?;
        match self.call(AppCall::FetchAdd { addr, delta })? {
            CallOutcome::Added { previous } => Ok(previous),
            other => Err(unexpected(other)),
        }
    }

    fn lock(&mut self, id: u64) -> Result<()> {
        self.call(AppCall::Lock(id)).map(|_| ())
    }

    fn unlock(&mut self, id: u64) -> Result<()> {
        self.call(AppCall::Unlock(id)).map(|_| ())
    }

    /// Returns the released epoch.
    fn barrier(&mut self, id: u64, expected: u32) -> Result<u64> {
        match self.call(AppCall::Barrier { id, expected })? {
            CallOutcome::BarrierPassed { epoch } => Ok(epoch),
            other => Err(unexpected(other)),
        }
    }

    /// Writes back and drops every cached page.
    fn flush(&mut self) -> Result<()> {
        self.call(AppCall::Flush).map(|_| ())
    }
}

fn unexpected(o: CallOutcome) -> Error {
    Error::Transport(format!("unexpected outcome {o:?}"))
}

/// A simulated cluster shared by per-node sessions. Each call runs the
/// simulation until that call completes, so sessions suit single-client
/// use; concurrent multi-node programs go through `sim::run`.
pub struct SimDsm {
    cluster: Cluster,
    alloc: PagingAllocator,
    last_ns: u64,
}

impl SimDsm {
    pub fn map(cfg: SimConfig, seed: u64) -> Result<Self> {
        let cluster = Cluster::new(cfg, seed)?;
        let alloc = PagingAllocator::new(cluster.config(), 0);
        Ok(Self {
            cluster,
            alloc,
            last_ns: 0,
        })
    }

    /// Keeps `[0, len)` out of reach of `paging_alloc`.
    pub fn reserve_shared(&mut self, len: u64) {
        self.alloc = PagingAllocator::new(self.cluster.config(), len);
    }

    pub fn session(&mut self, i: u16) -> Result<SimSession<'_>> {
        if i >= self.cluster.config().num_computes {
            return Err(Error::Config(format!("no compute node c{i}")));
        }
        Ok(SimSession { dsm: self, index: i })
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    /// Virtual duration of the most recent call.
    pub fn last_elapsed_ns(&self) -> u64 {
        self.last_ns
    }
}

pub struct SimSession<'a> {
    dsm: &'a mut SimDsm,
    index: u16,
}

impl SimSession<'_> {
    pub fn last_elapsed_ns(&self) -> u64 {
        self.dsm.last_ns
    }

    pub fn now(&self) -> u64 {
        self.dsm.cluster.now()
    }
}

impl Dsm for SimSession<'_> {
    fn node(&self) -> NodeId {
        NodeId::compute(self.index)
    }

    fn config(&self) -> &GasConfig {
        self.dsm.cluster.config()
    }

    fn call(&mut self, call: AppCall) -> Result<CallOutcome> {
        let (o, ns) = self.dsm.cluster.call(self.index, call)?;
        self.dsm.last_ns = ns;
        Ok(o)
    }

    fn paging_alloc(&mut self, len: u64) -> Result<DsmRegion> {
        let me = self.node();
        self.dsm.alloc.alloc(me, len)
    }

    fn check_access(&self, addr: u64, len: u64) -> Result<()> {
        self.dsm.alloc.check_access(self.node(), addr, len)
    }
}

/// Session over the TCP backend. Paging regions are tracked per session;
/// separate processes must agree on disjoint regions themselves.
pub struct StreamSession {
    gas: GasConfig,
    compute: StreamCompute,
    alloc: PagingAllocator,
}

impl StreamSession {
    pub fn new(gas: GasConfig, compute: StreamCompute) -> Self {
        let alloc = PagingAllocator::new(&gas, 0);
        Self { gas, compute, alloc }
    }

    pub fn into_inner(self) -> StreamCompute {
        self.compute
    }
}

impl Dsm for StreamSession {
    fn node(&self) -> NodeId {
        self.compute.id()
    }

    fn config(&self) -> &GasConfig {
        &self.gas
    }

    fn call(&mut self, call: AppCall) -> Result<CallOutcome> {
        self.compute.call(call)
    }

    fn paging_alloc(&mut self, len: u64) -> Result<DsmRegion> {
        let me = self.node();
        self.alloc.alloc(me, len)
    }

    fn check_access(&self, addr: u64, len: u64) -> Result<()> {
        self.alloc.check_access(self.node(), addr, len)
    }
}
