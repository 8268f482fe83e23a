//! Server-side page directory records.

use std::collections::{BTreeSet, VecDeque};

use crate::geometry::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageStatus {
    /// The server copy is authoritative.
    Current,
    /// A compute node holds the latest copy read-only.
    CurrentOnCompute(NodeId),
    WriteLocked(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageDirectoryEntry {
    pub status: PageStatus,
    pub readers: BTreeSet<NodeId>,
    pub write_queue: VecDeque<NodeId>,
    pub server_copy: Vec<u8>,
}

impl PageDirectoryEntry {
    pub fn new(page_size: usize) -> Self {
        Self {
            status: PageStatus::Current,
            readers: BTreeSet::new(),
            write_queue: VecDeque::new(),
            server_copy: vec![0; page_size],
        }
    }

    pub fn writer(&self) -> Option<NodeId> {
        match self.status {
            PageStatus::WriteLocked(w) => Some(w),
            _ => None,
        }
    }

    /// Checks the structural invariants, naming the first one broken.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for n in &self.write_queue {
            if !seen.insert(*n) {
                return Err(format!("{n} queued twice"));
            }
        }
        if self.readers.iter().chain(&self.write_queue).any(|n| !n.is_compute()) {
            return Err("server node in reader set or write queue".into());
        }
        match self.status {
            PageStatus::Current => {}
            PageStatus::CurrentOnCompute(h) => {
                if !h.is_compute() {
                    return Err(format!("holder {h} is not a compute node"));
                }
                if !self.readers.contains(&h) {
                    return Err(format!("holder {h} missing from readers"));
                }
            }
            PageStatus::WriteLocked(w) => {
                if !w.is_compute() {
                    return Err(format!("writer {w} is not a compute node"));
                }
                if self.readers.contains(&w) {
                    return Err(format!("writer {w} also listed as reader"));
                }
                if self.write_queue.contains(&w) {
                    return Err(format!("writer {w} waiting on its own lock"));
                }
            }
        }
        Ok(())
    }
}
