//! Barrier and mutex managers hosted on memory servers.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::NodeId;

/// FNV-1a over the little-endian id bytes.
pub fn fnv1a(id: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Server hosting the manager for a barrier or lock id.
pub fn manager_of(id: u64, num_servers: u16) -> NodeId {
    NodeId::server((fnv1a(id) % u64::from(num_servers)) as u16)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarrierState {
    pub barrier_id: u64,
    pub expected: u32,
    /// Arrival order of the current epoch.
    pub arrived: Vec<NodeId>,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MutexState {
    pub lock_id: u64,
    pub holder: Option<NodeId>,
    pub wait_queue: VecDeque<NodeId>,
}

/// A completed barrier epoch: who to release and the epoch number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub epoch: u64,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Default)]
pub struct SyncManager {
    barriers: HashMap<u64, BarrierState>,
    locks: HashMap<u64, MutexState>,
}

impl SyncManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn barrier(&self, id: u64) -> Option<&BarrierState> {
        self.barriers.get(&id)
    }

    pub fn lock(&self, id: u64) -> Option<&MutexState> {
        self.locks.get(&id)
    }

    pub fn barrier_enter(
        &mut self,
        id: u64,
        expected: u32,
        node: NodeId,
        me: NodeId,
    ) -> Result<Option<Release>> {
        if expected == 0 {
            return Err(crate::error::protocol_err(me, format!("barrier {id}: expected=0")));
        }
        let b = self.barriers.entry(id).or_insert_with(|| BarrierState {
            barrier_id: id,
            expected,
            arrived: Vec::new(),
            epoch: 0,
        });
        if b.arrived.is_empty() {
            b.expected = expected;
        } else if b.expected != expected {
            return Err(crate::error::protocol_err(
                me,
                format!(
                    "barrier {id}: {node} expects {expected}, epoch {} expects {}",
                    b.epoch, b.expected
                ),
            ));
        }
        if b.arrived.contains(&node) {
            return Err(crate::error::protocol_err(
                me,
                format!("barrier {id}: {node} entered twice in epoch {}", b.epoch),
            ));
        }
        b.arrived.push(node);
        if b.arrived.len() as u32 == b.expected {
            let nodes = std::mem::take(&mut b.arrived);
            let epoch = b.epoch;
            b.epoch += 1;
            return Ok(Some(Release { epoch, nodes }));
        }
        Ok(None)
    }

    /// Returns `Some(node)` when the lock is granted immediately.
    pub fn lock_acquire(&mut self, id: u64, node: NodeId) -> Result<Option<NodeId>> {
        let m = self.locks.entry(id).or_insert_with(|| MutexState {
            lock_id: id,
            ..MutexState::default()
        });
        if m.holder == Some(node) || m.wait_queue.contains(&node) {
            return Err(Error::Lock {
                lock_id: id,
                detail: format!("{node} already holds or waits (no reentrancy)"),
            });
        }
        if m.holder.is_none() {
            m.holder = Some(node);
            return Ok(Some(node));
        }
        m.wait_queue.push_back(node);
        Ok(None)
    }

    /// Returns the next holder, if any waiter was granted.
    pub fn lock_release(&mut self, id: u64, node: NodeId) -> Result<Option<NodeId>> {
        let m = self
            .locks
            .get_mut(&id)
            .filter(|m| m.holder == Some(node))
            .ok_or_else(|| Error::Lock {
                lock_id: id,
                detail: format!("release by non-holder {node}"),
            })?;
        m.holder = m.wait_queue.pop_front();
        Ok(m.holder)
    }
}
