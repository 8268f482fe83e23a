//! Compute-node side: the local page cache, write time slices, and the
//! executor that turns application calls into page accesses.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::{Envelope, Stamp};
use crate::error::{protocol_err, Error, Result};
use crate::geometry::{GasConfig, NodeId, PageId};
use crate::message::{Message, MsgKind};
use crate::sync::manager_of;
use crate::transport::LatencyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Privilege {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedPage {
    pub page: PageId,
    pub data: Vec<u8>,
    pub privilege: Privilege,
    /// Set for write-privileged pages and for a downgraded latest-copy holder.
    pub dirty: bool,
    /// Local-clock end of the write time slice (meaningful for `Write`).
    pub slice_deadline: i64,
    pub pending_handoff: Option<NodeId>,
    pub pending_copy_reqs: BTreeSet<NodeId>,
    last_used: u64,
    timer_armed: bool,
}

impl CachedPage {
    fn pinned(&self) -> bool {
        self.pending_handoff.is_some() || !self.pending_copy_reqs.is_empty()
    }

    /// True when this node holds the directory's latest copy read-only.
    pub fn is_holder(&self) -> bool {
        self.privilege == Privilege::Read && self.dirty
    }
}

/// One application-level operation on the global address space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppCall {
    Read { addr: u64, len: u64 },
    Write { addr: u64, bytes: Vec<u8> },
    /// Adds to the little-endian `u64` at an 8-aligned address.
    FetchAdd { addr: u64, delta: u64 },
    Lock(u64),
    Unlock(u64),
    Barrier { id: u64, expected: u32 },
    /// Writes back and drops every cached page.
    Flush,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallOutcome {
    Read(Vec<u8>),
    Written,
    Added { previous: u64 },
    Locked,
    Unlocked,
    BarrierPassed { epoch: u64 },
    Flushed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send(Envelope),
    /// Wake this node with `on_timer(page)` once the local clock reaches `deadline`.
    Timer { page: PageId, deadline: i64 },
    /// The application is busy for `ns`; call `resume` afterwards.
    Busy { ns: u64 },
    Done(CallOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FetchState {
    AwaitWritebackAck,
    Requested,
}

#[derive(Debug, Clone)]
struct Fetch {
    page: PageId,
    mode: Privilege,
    state: FetchState,
    /// Invalidated while the read was in flight: serve once, do not cache.
    use_once: bool,
}

#[derive(Debug, Clone)]
enum Waiting {
    Runnable,
    Page,
    Busy,
    Lock(u64),
    Barrier(u64),
    /// Cache full of pinned pages; retried after the next event.
    Stalled,
    FlushAck,
}

#[derive(Debug, Clone)]
struct CallState {
    call: AppCall,
    cursor: u64,
    buf: Vec<u8>,
    waiting: Waiting,
}

pub struct ComputeNode {
    id: NodeId,
    cfg: Arc<GasConfig>,
    model: LatencyModel,
    cache: HashMap<u64, CachedPage>,
    tick: u64,
    stamp: Stamp,
    call: Option<CallState>,
    fetch: Option<Fetch>,
    once: Option<(PageId, Vec<u8>)>,
    wb_wait: Option<PageId>,
    held_locks: BTreeSet<u64>,
}

impl ComputeNode {
    pub fn new(id: NodeId, cfg: Arc<GasConfig>, model: LatencyModel) -> Self {
        assert!(id.is_compute());
        Self {
            id,
            cfg,
            model,
            cache: HashMap::new(),
            tick: 0,
            stamp: Stamp::new(id),
            call: None,
            fetch: None,
            once: None,
            wb_wait: None,
            held_locks: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &GasConfig {
        &self.cfg
    }

    pub fn cached(&self, page: PageId) -> Option<&CachedPage> {
        self.cache.get(&page.0)
    }

    pub fn cached_pages(&self) -> impl Iterator<Item = &CachedPage> {
        self.cache.values()
    }

    pub fn is_idle(&self) -> bool {
        self.call.is_none()
    }

    pub fn held_locks(&self) -> &BTreeSet<u64> {
        &self.held_locks
    }

    /// Describes the blocked call, for deadlock reports.
    pub fn describe_call(&self) -> Option<String> {
        self.call
            .as_ref()
            .map(|c| format!("{:?} waiting on {:?} (fetch {:?})", c.call, c.waiting, self.fetch))
    }

    pub fn start_call(&mut self, call: AppCall, now: i64) -> Result<Vec<Output>> {
        if self.call.is_some() {
            return Err(protocol_err(self.id, "application call already in progress"));
        }
        match &call {
            AppCall::Read { addr, len } => self.cfg.check_range(*addr, *len)?,
            AppCall::Write { addr, bytes } => self.cfg.check_range(*addr, bytes.len() as u64)?,
            AppCall::FetchAdd { addr, .. } => {
                self.cfg.check_range(*addr, 8)?;
                if addr % 8 != 0 || self.cfg.page_size < 8 {
                    return Err(Error::Address {
                        addr: *addr,
                        len: 8,
                        gas_size: self.cfg.gas_size,
                    });
                }
            }
            AppCall::Lock(id) if self.held_locks.contains(id) => {
                return Err(Error::Lock {
                    lock_id: *id,
                    detail: format!("{} already holds it (no reentrancy)", self.id),
                })
            }
            AppCall::Unlock(id) if !self.held_locks.contains(id) => {
                return Err(Error::Lock {
                    lock_id: *id,
                    detail: format!("release by non-holder {}", self.id),
                })
            }
            _ => {}
        }
        let cursor = match &call {
            AppCall::Read { addr, .. } | AppCall::Write { addr, .. } | AppCall::FetchAdd { addr, .. } => *addr,
            _ => 0,
        };
        self.call = Some(CallState {
            call,
            cursor,
            buf: Vec::new(),
            waiting: Waiting::Runnable,
        });
        let mut out = Vec::new();
        self.advance(now, &mut out)?;
        Ok(out)
    }

    /// Continues the current call after a `Busy` period.
    pub fn resume(&mut self, now: i64) -> Result<Vec<Output>> {
        let mut out = Vec::new();
        match self.call.as_mut() {
            Some(c) if matches!(c.waiting, Waiting::Busy) => c.waiting = Waiting::Runnable,
            _ => return Err(protocol_err(self.id, "resume without a busy call")),
        }
        self.advance(now, &mut out)?;
        Ok(out)
    }

    pub fn handle(&mut self, msg: Message, now: i64) -> Result<Vec<Output>> {
        let mut out = Vec::new();
        if let Some(b) = msg.kind.page_bytes() {
            if b.len() as u64 != self.cfg.page_size {
                return Err(protocol_err(self.id, format!("{}-byte page from {}", b.len(), msg.src)));
            }
        }
        let page = PageId(msg.page);
        let from = msg.src;
        match msg.kind {
            MsgKind::PageData(data) => self.on_page_data(page, data, now, &mut out)?,
            MsgKind::WriteGrant(data) | MsgKind::PrivilegeTransfer(data) => {
                self.on_write_install(page, Some(data), now, &mut out)?
            }
            MsgKind::Redirect { target, write } => self.on_redirect(page, target, write, &mut out)?,
            MsgKind::Nack => self.on_nack(page, &mut out),
            MsgKind::Invalidate => self.on_invalidate(page, from, &mut out)?,
            MsgKind::CopyReq => self.on_copy_req(page, from, now, &mut out),
            MsgKind::HandoffReq { on_behalf: None } => self.on_handoff_req(page, from, now, &mut out),
            MsgKind::HandoffReq { on_behalf: Some(n) } => {
                self.on_server_handoff(page, from, n, now, &mut out)?
            }
            MsgKind::WritebackAck => self.on_writeback_ack(page, now, &mut out)?,
            MsgKind::LockGrant => self.on_lock_grant(msg.page, &mut out)?,
            MsgKind::BarrierRelease { epoch } => self.on_barrier_release(msg.page, epoch, &mut out)?,
            other => {
                return Err(protocol_err(self.id, format!("unexpected {} from {from}", other.tag())))
            }
        }
        self.retry_stalled(now, &mut out)?;
        Ok(out)
    }

    pub fn on_timer(&mut self, page: PageId, now: i64) -> Result<Vec<Output>> {
        let mut out = Vec::new();
        let Some(p) = self.cache.get_mut(&page.0) else {
            return Ok(out);
        };
        p.timer_armed = false;
        if p.privilege != Privilege::Write {
            return Ok(out);
        }
        if now < p.slice_deadline {
            p.timer_armed = true;
            out.push(Output::Timer {
                page,
                deadline: p.slice_deadline,
            });
            return Ok(out);
        }
        if let Some(c) = p.pending_handoff {
            self.transfer(page, c, &mut out);
        } else if !p.pending_copy_reqs.is_empty() {
            let reqs = std::mem::take(&mut p.pending_copy_reqs);
            self.downgrade_and_serve(page, reqs, &mut out);
        }
        self.retry_stalled(now, &mut out)?;
        Ok(out)
    }

    fn send(&mut self, out: &mut Vec<Output>, dst: NodeId, page: u64, kind: MsgKind) {
        out.push(Output::Send(self.stamp.make(dst, page, kind)));
    }

    fn owner(&self, page: PageId) -> NodeId {
        self.cfg.owner_of(page)
    }

    // ---- protocol handlers ----

    fn expect_fetch(&self, page: PageId, mode: Privilege) -> Result<()> {
        match &self.fetch {
            Some(f) if f.page == page && f.mode == mode && f.state == FetchState::Requested => Ok(()),
            _ => Err(protocol_err(
                self.id,
                format!("unsolicited {mode:?} data for page {page} (fetch {:?})", self.fetch),
            )),
        }
    }

    fn on_page_data(&mut self, page: PageId, data: Vec<u8>, now: i64, out: &mut Vec<Output>) -> Result<()> {
        self.expect_fetch(page, Privilege::Read)?;
        let f = self.fetch.take().unwrap();
        if f.use_once {
            self.once = Some((page, data));
            let owner = self.owner(page);
            self.send(out, owner, page.0, MsgKind::ReaderDrop);
        } else {
            self.tick += 1;
            self.cache.insert(
                page.0,
                CachedPage {
                    page,
                    data,
                    privilege: Privilege::Read,
                    dirty: false,
                    slice_deadline: 0,
                    pending_handoff: None,
                    pending_copy_reqs: BTreeSet::new(),
                    last_used: self.tick,
                    timer_armed: false,
                },
            );
        }
        self.page_ready(page, now, out)
    }

    /// Installs write privilege. `data` is `None` for an in-place upgrade.
    fn on_write_install(
        &mut self,
        page: PageId,
        data: Option<Vec<u8>>,
        now: i64,
        out: &mut Vec<Output>,
    ) -> Result<()> {
        self.expect_fetch(page, Privilege::Write)?;
        self.fetch = None;
        self.tick += 1;
        let deadline = now + self.cfg.slice_ns();
        let tick = self.tick;
        match (self.cache.get_mut(&page.0), data) {
            (Some(p), None) => {
                p.privilege = Privilege::Write;
                p.dirty = true;
                p.slice_deadline = deadline;
                p.last_used = tick;
            }
            (_, Some(data)) => {
                self.cache.insert(
                    page.0,
                    CachedPage {
                        page,
                        data,
                        privilege: Privilege::Write,
                        dirty: true,
                        slice_deadline: deadline,
                        pending_handoff: None,
                        pending_copy_reqs: BTreeSet::new(),
                        last_used: tick,
                        timer_armed: false,
                    },
                );
            }
            (None, None) => return Err(protocol_err(self.id, format!("upgrade of uncached page {page}"))),
        }
        self.page_ready(page, now, out)
    }

    fn on_redirect(&mut self, page: PageId, target: NodeId, write: bool, out: &mut Vec<Output>) -> Result<()> {
        let mode = if write { Privilege::Write } else { Privilege::Read };
        self.expect_fetch(page, mode)?;
        if target == self.id {
            return Err(protocol_err(self.id, format!("redirected to self for page {page}")));
        }
        let kind = if write {
            MsgKind::HandoffReq { on_behalf: None }
        } else {
            MsgKind::CopyReq
        };
        self.send(out, target, page.0, kind);
        Ok(())
    }

    fn on_nack(&mut self, page: PageId, out: &mut Vec<Output>) {
        let retry = match &self.fetch {
            Some(f) if f.page == page && f.state == FetchState::Requested => f.mode,
            _ => return,
        };
        let owner = self.owner(page);
        self.send(out, owner, page.0, request_kind(retry));
    }

    fn on_invalidate(&mut self, page: PageId, from: NodeId, out: &mut Vec<Output>) -> Result<()> {
        match self.cache.get(&page.0) {
            Some(p) if p.privilege == Privilege::Write || p.dirty => {
                return Err(protocol_err(
                    self.id,
                    format!("Invalidate for page {page} held as {:?} (dirty={})", p.privilege, p.dirty),
                ));
            }
            Some(_) => {
                self.cache.remove(&page.0);
            }
            None => {
                if let Some(f) = self.fetch.as_mut() {
                    if f.page == page && f.mode == Privilege::Read {
                        f.use_once = true;
                    }
                }
            }
        }
        self.send(out, from, page.0, MsgKind::InvalidateAck);
        Ok(())
    }

    fn on_copy_req(&mut self, page: PageId, from: NodeId, now: i64, out: &mut Vec<Output>) {
        let Some(p) = self.cache.get_mut(&page.0) else {
            self.send(out, from, page.0, MsgKind::Nack);
            return;
        };
        match p.privilege {
            Privilege::Write if now >= p.slice_deadline && p.pending_handoff.is_none() => {
                self.downgrade_and_serve(page, BTreeSet::from([from]), out);
            }
            Privilege::Write => {
                p.pending_copy_reqs.insert(from);
                self.arm_timer(page, out);
            }
            Privilege::Read if p.dirty => {
                let data = p.data.clone();
                self.send(out, from, page.0, MsgKind::PageData(data));
            }
            Privilege::Read => self.send(out, from, page.0, MsgKind::Nack),
        }
    }

    fn on_handoff_req(&mut self, page: PageId, from: NodeId, now: i64, out: &mut Vec<Output>) {
        let Some(p) = self.cache.get_mut(&page.0) else {
            self.send(out, from, page.0, MsgKind::Nack);
            return;
        };
        if p.privilege != Privilege::Write || p.pending_handoff.is_some_and(|c| c != from) {
            self.send(out, from, page.0, MsgKind::Nack);
            return;
        }
        if now >= p.slice_deadline {
            self.transfer(page, from, out);
        } else {
            p.pending_handoff = Some(from);
            self.arm_timer(page, out);
        }
    }

    /// The owner asks the latest-copy holder to pass write privilege on
    /// (or to upgrade in place when `to` is this node).
    fn on_server_handoff(
        &mut self,
        page: PageId,
        server: NodeId,
        to: NodeId,
        now: i64,
        out: &mut Vec<Output>,
    ) -> Result<()> {
        let Some(p) = self.cache.get(&page.0) else {
            self.send(out, server, page.0, MsgKind::Nack);
            return Ok(());
        };
        if !p.is_holder() {
            return Err(protocol_err(
                self.id,
                format!("server handoff for page {page} held as {:?} dirty={}", p.privilege, p.dirty),
            ));
        }
        self.send(out, server, page.0, MsgKind::TransferNotice { new_writer: to });
        if to == self.id {
            self.on_write_install(page, None, now, out)
        } else {
            let p = self.cache.remove(&page.0).unwrap();
            self.send(out, to, page.0, MsgKind::PrivilegeTransfer(p.data));
            Ok(())
        }
    }

    fn on_writeback_ack(&mut self, page: PageId, now: i64, out: &mut Vec<Output>) -> Result<()> {
        if self.wb_wait != Some(page) {
            return Err(protocol_err(self.id, format!("unexpected WritebackAck for page {page}")));
        }
        self.wb_wait = None;
        if let Some(f) = self.fetch.as_mut() {
            if f.state == FetchState::AwaitWritebackAck {
                f.state = FetchState::Requested;
                let (p, mode) = (f.page, f.mode);
                let owner = self.owner(p);
                self.send(out, owner, p.0, request_kind(mode));
                return Ok(());
            }
        }
        if let Some(c) = self.call.as_mut() {
            if matches!(c.waiting, Waiting::FlushAck) {
                c.waiting = Waiting::Runnable;
                self.advance(now, out)?;
            }
        }
        Ok(())
    }

    fn on_lock_grant(&mut self, id: u64, out: &mut Vec<Output>) -> Result<()> {
        match self.call.as_ref().map(|c| &c.waiting) {
            Some(Waiting::Lock(l)) if *l == id => {
                self.held_locks.insert(id);
                self.call = None;
                out.push(Output::Done(CallOutcome::Locked));
                Ok(())
            }
            _ => Err(protocol_err(self.id, format!("unsolicited LockGrant for {id}"))),
        }
    }

    fn on_barrier_release(&mut self, id: u64, epoch: u64, out: &mut Vec<Output>) -> Result<()> {
        match self.call.as_ref().map(|c| &c.waiting) {
            Some(Waiting::Barrier(b)) if *b == id => {
                self.call = None;
                out.push(Output::Done(CallOutcome::BarrierPassed { epoch }));
                Ok(())
            }
            _ => Err(protocol_err(self.id, format!("unsolicited BarrierRelease for {id}"))),
        }
    }

    fn arm_timer(&mut self, page: PageId, out: &mut Vec<Output>) {
        let p = self.cache.get_mut(&page.0).unwrap();
        if !p.timer_armed {
            p.timer_armed = true;
            out.push(Output::Timer {
                page,
                deadline: p.slice_deadline,
            });
        }
    }

    /// Hands write privilege and the page to `to`; queued copy requests are
    /// sent back to the owner.
    fn transfer(&mut self, page: PageId, to: NodeId, out: &mut Vec<Output>) {
        let p = self.cache.remove(&page.0).unwrap();
        let owner = self.owner(page);
        self.send(out, to, page.0, MsgKind::PrivilegeTransfer(p.data));
        self.send(out, owner, page.0, MsgKind::TransferNotice { new_writer: to });
        for r in p.pending_copy_reqs {
            self.send(out, r, page.0, MsgKind::Nack);
        }
    }

    fn downgrade_and_serve(&mut self, page: PageId, reqs: BTreeSet<NodeId>, out: &mut Vec<Output>) {
        let p = self.cache.get_mut(&page.0).unwrap();
        p.privilege = Privilege::Read;
        p.dirty = true;
        let data = p.data.clone();
        for r in reqs {
            self.send(out, r, page.0, MsgKind::PageData(data.clone()));
        }
        let owner = self.owner(page);
        self.send(out, owner, page.0, MsgKind::Downgrade);
    }

    // ---- application executor ----

    fn retry_stalled(&mut self, now: i64, out: &mut Vec<Output>) -> Result<()> {
        if let Some(c) = self.call.as_mut() {
            if matches!(c.waiting, Waiting::Stalled) {
                c.waiting = Waiting::Runnable;
                self.advance(now, out)?;
            }
        }
        Ok(())
    }

    /// Runs the current call until it blocks, goes busy, or finishes.
    fn advance(&mut self, now: i64, out: &mut Vec<Output>) -> Result<()> {
        let Some(state) = self.call.as_ref() else {
            return Ok(());
        };
        if !matches!(state.waiting, Waiting::Runnable) {
            return Ok(());
        }
        // the call may carry a large write buffer, so only copy out scalars
        let call = match &state.call {
            AppCall::Read { addr, len } => Err((addr + len, Privilege::Read)),
            AppCall::Write { addr, bytes } => Err((addr + bytes.len() as u64, Privilege::Write)),
            AppCall::FetchAdd { addr, .. } => Err((addr + 8, Privilege::Write)),
            other => Ok(other.clone()),
        };
        let call = match call {
            Err((end, mode)) => return self.access_loop(end, mode, now, out),
            Ok(c) => c,
        };
        match call {
            AppCall::Read { .. } | AppCall::Write { .. } | AppCall::FetchAdd { .. } => unreachable!(),
            AppCall::Lock(id) => {
                let mgr = manager_of(id, self.cfg.num_servers);
                self.send(out, mgr, id, MsgKind::LockReq);
                self.call.as_mut().unwrap().waiting = Waiting::Lock(id);
                Ok(())
            }
            AppCall::Unlock(id) => {
                let mgr = manager_of(id, self.cfg.num_servers);
                self.send(out, mgr, id, MsgKind::LockRelease);
                self.held_locks.remove(&id);
                self.call = None;
                out.push(Output::Done(CallOutcome::Unlocked));
                Ok(())
            }
            AppCall::Barrier { id, expected } => {
                let mgr = manager_of(id, self.cfg.num_servers);
                self.send(out, mgr, id, MsgKind::BarrierEnter { expected });
                self.call.as_mut().unwrap().waiting = Waiting::Barrier(id);
                Ok(())
            }
            AppCall::Flush => self.flush_step(out),
        }
    }

    fn access_loop(
        &mut self,
        end: u64,
        mode: Privilege,
        now: i64,
        out: &mut Vec<Output>,
    ) -> Result<()> {
        let cursor = self.call.as_ref().unwrap().cursor;
        if cursor >= end {
            let state = self.call.take().unwrap();
            let outcome = match state.call {
                AppCall::Read { .. } => CallOutcome::Read(state.buf),
                AppCall::Write { .. } => CallOutcome::Written,
                AppCall::FetchAdd { .. } => CallOutcome::Added {
                    previous: u64::from_le_bytes(state.buf[..8].try_into().unwrap()),
                },
                _ => unreachable!(),
            };
            out.push(Output::Done(outcome));
            return Ok(());
        }
        let page = PageId(cursor / self.cfg.page_size);
        self.tick += 1;
        let tick = self.tick;
        let hit = match self.cache.get_mut(&page.0) {
            Some(p) if p.privilege >= mode => {
                p.last_used = tick;
                true
            }
            _ => false,
        };
        if hit {
            return self.page_ready(page, now, out);
        }
        let upgrade = self.cache.contains_key(&page.0);
        if !upgrade && self.cache.len() >= self.cfg.cache_frames() {
            match self.pick_victim(Some(page)) {
                None => {
                    self.call.as_mut().unwrap().waiting = Waiting::Stalled;
                    return Ok(());
                }
                Some(victim) => {
                    if self.evict(victim, out) {
                        self.fetch = Some(Fetch {
                            page,
                            mode,
                            state: FetchState::AwaitWritebackAck,
                            use_once: false,
                        });
                        self.call.as_mut().unwrap().waiting = Waiting::Page;
                        return Ok(());
                    }
                }
            }
        }
        self.fetch = Some(Fetch {
            page,
            mode,
            state: FetchState::Requested,
            use_once: false,
        });
        let owner = self.owner(page);
        self.send(out, owner, page.0, request_kind(mode));
        self.call.as_mut().unwrap().waiting = Waiting::Page;
        Ok(())
    }

    /// The page for the current segment is available: apply the data effect
    /// and charge local access time.
    fn page_ready(&mut self, page: PageId, _now: i64, out: &mut Vec<Output>) -> Result<()> {
        let page_size = self.cfg.page_size;
        let state = self
            .call
            .as_mut()
            .ok_or_else(|| protocol_err(self.id, "page installed with no call"))?;
        let (page_start, _) = self.cfg.page_range(page);
        let off = (state.cursor - page_start) as usize;
        let seg_end = match &state.call {
            AppCall::Read { addr, len } => (addr + len).min(page_start + page_size),
            AppCall::Write { addr, bytes } => (addr + bytes.len() as u64).min(page_start + page_size),
            AppCall::FetchAdd { addr, .. } => addr + 8,
            _ => unreachable!(),
        };
        let seg = (seg_end - state.cursor) as usize;
        match &state.call {
            AppCall::Read { .. } => {
                let src = match (self.cache.get(&page.0), &self.once) {
                    (Some(p), _) => &p.data,
                    (None, Some((once_page, data))) if *once_page == page => data,
                    _ => return Err(protocol_err(self.id, format!("page {page} vanished before read"))),
                };
                state.buf.extend_from_slice(&src[off..off + seg]);
            }
            AppCall::Write { addr, bytes } => {
                let p = self.cache.get_mut(&page.0).unwrap();
                let from = (state.cursor - addr) as usize;
                p.data[off..off + seg].copy_from_slice(&bytes[from..from + seg]);
            }
            AppCall::FetchAdd { delta, .. } => {
                let p = self.cache.get_mut(&page.0).unwrap();
                let word: [u8; 8] = p.data[off..off + 8].try_into().unwrap();
                let prev = u64::from_le_bytes(word);
                p.data[off..off + 8].copy_from_slice(&prev.wrapping_add(*delta).to_le_bytes());
                state.buf = word.to_vec();
            }
            _ => unreachable!(),
        }
        self.once = None;
        state.cursor = seg_end;
        state.waiting = Waiting::Busy;
        out.push(Output::Busy {
            ns: self.model.local_access_ns(seg),
        });
        Ok(())
    }

    fn pick_victim(&self, exclude: Option<PageId>) -> Option<PageId> {
        self.cache
            .values()
            .filter(|p| Some(p.page) != exclude && !p.pinned())
            .min_by_key(|p| (p.last_used, p.page))
            .map(|p| p.page)
    }

    /// Evicts `victim`; returns true when a writeback ack must be awaited.
    fn evict(&mut self, victim: PageId, out: &mut Vec<Output>) -> bool {
        let p = self.cache.remove(&victim.0).unwrap();
        let owner = self.owner(victim);
        if p.dirty {
            self.send(out, owner, victim.0, MsgKind::Writeback(p.data));
            self.wb_wait = Some(victim);
            true
        } else {
            self.send(out, owner, victim.0, MsgKind::ReaderDrop);
            false
        }
    }

    fn flush_step(&mut self, out: &mut Vec<Output>) -> Result<()> {
        loop {
            if self.cache.is_empty() {
                self.call = None;
                out.push(Output::Done(CallOutcome::Flushed));
                return Ok(());
            }
            let Some(victim) = self.pick_victim(None) else {
                self.call.as_mut().unwrap().waiting = Waiting::Stalled;
                return Ok(());
            };
            if self.evict(victim, out) {
                self.call.as_mut().unwrap().waiting = Waiting::FlushAck;
                return Ok(());
            }
        }
    }
}

fn request_kind(mode: Privilege) -> MsgKind {
    match mode {
        Privilege::Read => MsgKind::ReadReq,
        Privilege::Write => MsgKind::WriteReq,
    }
}
