//! Memory-server side: page directory, invalidation, write queue, and the
//! hosted sync managers.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use super::{Envelope, Stamp};
use crate::directory::{PageDirectoryEntry, PageStatus};
use crate::error::{protocol_err, Error, Result};
use crate::geometry::{GasConfig, NodeId, PageId};
use crate::message::{Message, MsgKind};
use crate::sync::{manager_of, SyncManager};

/// Where the pending writer's page comes from once invalidation completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrantSource {
    /// `WriteGrant` carrying the server copy.
    Server,
    /// The `CurrentOnCompute` holder hands its copy over directly.
    Holder { holder: NodeId, handoff_sent: bool },
}

/// A write acquisition in progress. Other requests for the page wait in
/// `deferred` until it completes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingWrite {
    pub writer: NodeId,
    pub outstanding: BTreeSet<NodeId>,
    pub source: GrantSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Request {
    Read,
    Write,
}

#[derive(Debug, Clone)]
pub struct ServerPageView {
    pub entry: PageDirectoryEntry,
    pub pending: Option<PendingWrite>,
    deferred: VecDeque<(NodeId, Request)>,
}

impl ServerPageView {
    fn new(page_size: usize) -> Self {
        Self {
            entry: PageDirectoryEntry::new(page_size),
            pending: None,
            deferred: VecDeque::new(),
        }
    }

    /// Readers waiting for an in-flight write acquisition to finish.
    pub fn pending_readers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.deferred
            .iter()
            .filter(|(_, r)| *r == Request::Read)
            .map(|(n, _)| *n)
    }

    pub fn check(&self) -> Result<(), String> {
        self.entry.check()?;
        if let Some(p) = &self.pending {
            if p.outstanding.contains(&p.writer) {
                return Err(format!("writer {} awaiting its own invalidation", p.writer));
            }
        }
        Ok(())
    }
}

pub struct ServerNode {
    id: NodeId,
    cfg: Arc<GasConfig>,
    pages: HashMap<u64, ServerPageView>,
    sync: SyncManager,
    stamp: Stamp,
}

impl ServerNode {
    pub fn new(id: NodeId, cfg: Arc<GasConfig>) -> Self {
        assert!(id.is_server());
        Self {
            id,
            cfg,
            pages: HashMap::new(),
            sync: SyncManager::new(),
            stamp: Stamp::new(id),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn page(&self, page: PageId) -> Option<&ServerPageView> {
        self.pages.get(&page.0)
    }

    pub fn pages(&self) -> impl Iterator<Item = (PageId, &ServerPageView)> {
        self.pages.iter().map(|(k, v)| (PageId(*k), v))
    }

    pub fn sync(&self) -> &SyncManager {
        &self.sync
    }

    /// Installs a directory entry directly; used to script protocol states.
    pub fn set_page(&mut self, page: PageId, entry: PageDirectoryEntry) {
        let mut view = ServerPageView::new(self.cfg.page_size as usize);
        view.entry = entry;
        self.pages.insert(page.0, view);
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Envelope>> {
        let mut out = Vec::new();
        let src = msg.src;
        if !self.cfg.contains(src) {
            return Err(protocol_err(self.id, format!("message from unknown node {src}")));
        }
        if msg.kind.tag().is_sync() {
            self.handle_sync(msg, &mut out)?;
            return Ok(out);
        }
        if !src.is_compute() {
            return Err(protocol_err(self.id, format!("{:?} from server {src}", msg.kind.tag())));
        }
        let page = PageId(msg.page);
        self.cfg
            .check_page(page)
            .map_err(|e| protocol_err(self.id, e.to_string()))?;
        if self.cfg.owner_of(page) != self.id {
            return Err(protocol_err(self.id, format!("page {page} is not owned here")));
        }
        if let Some(bytes) = msg.kind.page_bytes() {
            if bytes.len() as u64 != self.cfg.page_size {
                return Err(protocol_err(self.id, format!("{}-byte page", bytes.len())));
            }
        }
        match msg.kind {
            MsgKind::ReadReq => self.read_req(page, src, &mut out)?,
            MsgKind::WriteReq => self.write_req(page, src, &mut out)?,
            MsgKind::InvalidateAck => self.invalidate_ack(page, src, &mut out)?,
            MsgKind::TransferNotice { new_writer } => {
                self.transfer_notice(page, src, new_writer, &mut out)?
            }
            MsgKind::Downgrade => self.downgrade(page, src, &mut out)?,
            MsgKind::Writeback(bytes) => self.writeback(page, src, bytes, &mut out)?,
            MsgKind::ReaderDrop => self.reader_drop(page, src)?,
            // A server-initiated handoff raced with the holder's writeback;
            // the writeback completes the acquisition.
            MsgKind::Nack => {}
            other => {
                return Err(protocol_err(
                    self.id,
                    format!("unexpected {} from {src}", other.tag()),
                ))
            }
        }
        if cfg!(debug_assertions) {
            if let Some(v) = self.pages.get(&page.0) {
                v.check().map_err(|e| protocol_err(self.id, format!("page {page}: {e}")))?;
            }
        }
        Ok(out)
    }

    fn view(&mut self, page: PageId) -> &mut ServerPageView {
        let size = self.cfg.page_size as usize;
        self.pages
            .entry(page.0)
            .or_insert_with(|| ServerPageView::new(size))
    }

    fn send(&mut self, out: &mut Vec<Envelope>, dst: NodeId, page: PageId, kind: MsgKind) {
        out.push(self.stamp.make(dst, page.0, kind));
    }

    fn read_req(&mut self, page: PageId, r: NodeId, out: &mut Vec<Envelope>) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        if v.pending.is_some() {
            v.deferred.push_back((r, Request::Read));
            return Ok(());
        }
        let reply = match v.entry.status {
            PageStatus::Current => MsgKind::PageData(v.entry.server_copy.clone()),
            PageStatus::CurrentOnCompute(h) | PageStatus::WriteLocked(h) => {
                if h == r {
                    return Err(protocol_err(me, format!("read request from holder {r}")));
                }
                MsgKind::Redirect {
                    target: h,
                    write: false,
                }
            }
        };
        v.entry.readers.insert(r);
        self.send(out, r, page, reply);
        Ok(())
    }

    fn write_req(&mut self, page: PageId, c: NodeId, out: &mut Vec<Envelope>) -> Result<()> {
        let v = self.view(page);
        if let Some(p) = &v.pending {
            let waiting = v.deferred.iter().any(|&(n, r)| n == c && r == Request::Write);
            if p.writer != c && !waiting {
                v.deferred.push_back((c, Request::Write));
            }
            return Ok(());
        }
        match v.entry.status {
            PageStatus::Current => {
                v.entry.readers.remove(&c);
                let others = std::mem::take(&mut v.entry.readers);
                if others.is_empty() {
                    self.grant_from_server(page, c, out);
                } else {
                    v.pending = Some(PendingWrite {
                        writer: c,
                        outstanding: others.clone(),
                        source: GrantSource::Server,
                    });
                    for r in others {
                        self.send(out, r, page, MsgKind::Invalidate);
                    }
                }
            }
            PageStatus::CurrentOnCompute(h) => self.begin_holder_handoff(page, h, c, out),
            PageStatus::WriteLocked(w) => {
                if w == c {
                    return Ok(());
                }
                match v.entry.write_queue.iter().position(|&n| n == c) {
                    // Head retrying after a Nack from the writer.
                    Some(0) => {}
                    Some(_) => return Ok(()),
                    None => {
                        v.entry.write_queue.push_back(c);
                        if v.entry.write_queue.len() > 1 {
                            return Ok(());
                        }
                    }
                }
                self.send(
                    out,
                    c,
                    page,
                    MsgKind::Redirect {
                        target: w,
                        write: true,
                    },
                );
            }
        }
        Ok(())
    }

    /// `CurrentOnCompute(holder)` and `writer` wants the page: invalidate the
    /// other readers, then ask the holder to hand over its copy.
    fn begin_holder_handoff(
        &mut self,
        page: PageId,
        holder: NodeId,
        writer: NodeId,
        out: &mut Vec<Envelope>,
    ) {
        let v = self.view(page);
        let mut others = std::mem::take(&mut v.entry.readers);
        others.remove(&holder);
        others.remove(&writer);
        v.entry.readers.insert(holder);
        v.pending = Some(PendingWrite {
            writer,
            outstanding: others.clone(),
            source: GrantSource::Holder {
                holder,
                handoff_sent: false,
            },
        });
        if others.is_empty() {
            self.finish_invalidation(page, out);
        } else {
            for r in others {
                self.send(out, r, page, MsgKind::Invalidate);
            }
        }
    }

    fn grant_from_server(&mut self, page: PageId, c: NodeId, out: &mut Vec<Envelope>) {
        let v = self.view(page);
        v.entry.status = PageStatus::WriteLocked(c);
        v.entry.readers.remove(&c);
        let data = v.entry.server_copy.clone();
        self.send(out, c, page, MsgKind::WriteGrant(data));
    }

    fn invalidate_ack(&mut self, page: PageId, a: NodeId, out: &mut Vec<Envelope>) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        let Some(p) = v.pending.as_mut().filter(|p| p.outstanding.contains(&a)) else {
            return Err(protocol_err(me, format!("unexpected InvalidateAck from {a} for page {page}")));
        };
        p.outstanding.remove(&a);
        if p.outstanding.is_empty() {
            self.finish_invalidation(page, out);
        }
        Ok(())
    }

    /// All acks are in: grant from the server copy or ask the holder.
    fn finish_invalidation(&mut self, page: PageId, out: &mut Vec<Envelope>) {
        let v = self.view(page);
        let p = v.pending.as_mut().expect("pending write");
        let writer = p.writer;
        match p.source {
            GrantSource::Server => {
                v.pending = None;
                self.grant_from_server(page, writer, out);
                self.after_grant(page, out);
            }
            GrantSource::Holder { holder, .. } => {
                p.source = GrantSource::Holder {
                    holder,
                    handoff_sent: true,
                };
                self.send(
                    out,
                    holder,
                    page,
                    MsgKind::HandoffReq {
                        on_behalf: Some(writer),
                    },
                );
            }
        }
    }

    /// Redirects the new queue head to the new writer, then replays
    /// requests that arrived during the acquisition.
    fn after_grant(&mut self, page: PageId, out: &mut Vec<Envelope>) {
        let v = self.view(page);
        if let (PageStatus::WriteLocked(w), Some(&head)) =
            (v.entry.status, v.entry.write_queue.front())
        {
            self.send(
                out,
                head,
                page,
                MsgKind::Redirect {
                    target: w,
                    write: true,
                },
            );
        }
        loop {
            let v = self.view(page);
            if v.pending.is_some() {
                break;
            }
            let Some((n, req)) = v.deferred.pop_front() else {
                break;
            };
            // Replayed requests come from valid compute nodes; errors here
            // would have surfaced on first arrival.
            let _ = match req {
                Request::Read => self.read_req(page, n, out),
                Request::Write => self.write_req(page, n, out),
            };
        }
    }

    fn transfer_notice(
        &mut self,
        page: PageId,
        old: NodeId,
        new: NodeId,
        out: &mut Vec<Envelope>,
    ) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        if let Some(p) = &v.pending {
            if p.writer == new
                && p.source
                    == (GrantSource::Holder {
                        holder: old,
                        handoff_sent: true,
                    })
            {
                v.pending = None;
                v.entry.readers.clear();
                v.entry.status = PageStatus::WriteLocked(new);
                self.after_grant(page, out);
                return Ok(());
            }
            return Err(protocol_err(me, format!("stray TransferNotice {old}->{new} on page {page}")));
        }
        match v.entry.status {
            PageStatus::WriteLocked(w) if w == old && v.entry.write_queue.front() == Some(&new) => {
                v.entry.write_queue.pop_front();
                v.entry.readers.remove(&new);
                v.entry.status = PageStatus::WriteLocked(new);
                if let Some(&head) = v.entry.write_queue.front() {
                    self.send(
                        out,
                        head,
                        page,
                        MsgKind::Redirect {
                            target: new,
                            write: true,
                        },
                    );
                }
                Ok(())
            }
            s => Err(protocol_err(
                me,
                format!("TransferNotice {old}->{new} on page {page} in state {s:?}"),
            )),
        }
    }

    fn downgrade(&mut self, page: PageId, w: NodeId, out: &mut Vec<Envelope>) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        if v.pending.is_some() || v.entry.status != PageStatus::WriteLocked(w) {
            return Err(protocol_err(me, format!("Downgrade from non-writer {w} on page {page}")));
        }
        v.entry.status = PageStatus::CurrentOnCompute(w);
        v.entry.readers.insert(w);
        if let Some(head) = v.entry.write_queue.pop_front() {
            self.begin_holder_handoff(page, w, head, out);
        }
        Ok(())
    }

    fn writeback(
        &mut self,
        page: PageId,
        from: NodeId,
        bytes: Vec<u8>,
        out: &mut Vec<Envelope>,
    ) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        match (&mut v.pending, v.entry.status) {
            (Some(p), PageStatus::CurrentOnCompute(h)) if h == from => {
                // Holder evicted before handing off; grant from the fresh copy.
                v.entry.server_copy = bytes;
                v.entry.status = PageStatus::Current;
                v.entry.readers.remove(&h);
                p.source = GrantSource::Server;
                let done = p.outstanding.is_empty();
                self.send(out, from, page, MsgKind::WritebackAck);
                if done {
                    self.finish_invalidation(page, out);
                }
            }
            (None, PageStatus::CurrentOnCompute(h)) if h == from => {
                v.entry.server_copy = bytes;
                v.entry.status = PageStatus::Current;
                v.entry.readers.remove(&h);
                self.send(out, from, page, MsgKind::WritebackAck);
            }
            (None, PageStatus::WriteLocked(w)) if w == from => {
                v.entry.server_copy = bytes;
                v.entry.status = PageStatus::Current;
                let next = v.entry.write_queue.pop_front();
                self.send(out, from, page, MsgKind::WritebackAck);
                if let Some(next) = next {
                    self.grant_from_server(page, next, out);
                    self.after_grant(page, out);
                }
            }
            (_, s) => {
                return Err(protocol_err(
                    me,
                    format!("stale Writeback from {from} on page {page} in state {s:?}"),
                ))
            }
        }
        Ok(())
    }

    fn reader_drop(&mut self, page: PageId, r: NodeId) -> Result<()> {
        let me = self.id;
        let v = self.view(page);
        if v.entry.status == PageStatus::CurrentOnCompute(r) {
            return Err(protocol_err(me, format!("holder {r} dropped page {page} without writeback")));
        }
        v.entry.readers.remove(&r);
        Ok(())
    }

    fn handle_sync(&mut self, msg: Message, out: &mut Vec<Envelope>) -> Result<()> {
        let id = msg.page;
        let node = msg.src;
        if manager_of(id, self.cfg.num_servers) != self.id {
            return Err(protocol_err(self.id, format!("sync id {id} not managed here")));
        }
        match msg.kind {
            MsgKind::BarrierEnter { expected } => {
                if let Some(rel) = self.sync.barrier_enter(id, expected, node, self.id)? {
                    for n in rel.nodes {
                        out.push(self.stamp.make(n, id, MsgKind::BarrierRelease { epoch: rel.epoch }));
                    }
                }
            }
            MsgKind::LockReq => {
                if let Some(n) = self.sync.lock_acquire(id, node)? {
                    out.push(self.stamp.make(n, id, MsgKind::LockGrant));
                }
            }
            MsgKind::LockRelease => {
                if let Some(n) = self.sync.lock_release(id, node)? {
                    out.push(self.stamp.make(n, id, MsgKind::LockGrant));
                }
            }
            other => {
                return Err(Error::Protocol {
                    node: self.id,
                    detail: format!("unexpected {} from {node}", other.tag()),
                })
            }
        }
        Ok(())
    }
}
