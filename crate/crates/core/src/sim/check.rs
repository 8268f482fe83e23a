//! Offline trace checker for the protocol and sync invariants.
//!
//! Each trace line is replayed twice on a merged timeline: once at its send
//! instant (as an action of the sender) and once at its delivery instant (as
//! an input to the receiver). Deliveries sort before sends at equal times,
//! since a handler's replies carry the delivery instant as their send time.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::trace::{Trace, TraceEvent};
use crate::geometry::NodeId;
use crate::message::KindTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    SingleWriter,
    GrantSafety,
    Slice,
    SpontaneousRelinquish,
    FifoQueue,
    MutualExclusion,
    BarrierSafety,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SingleWriter => "single-writer",
            Self::GrantSafety => "grant-safety",
            Self::Slice => "slice",
            Self::SpontaneousRelinquish => "spontaneous-relinquish",
            Self::FifoQueue => "fifo-queue",
            Self::MutualExclusion => "mutual-exclusion",
            Self::BarrierSafety => "barrier-safety",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Index of the offending trace line.
    pub index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckReport {
    pub events: usize,
    /// Sorted by trace index.
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.count(kind) > 0
    }

    /// `VIOLATION <kind> <event_index>` per finding.
    pub fn machine_lines(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("VIOLATION {} {}\n", v.kind, v.index))
            .collect()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return writeln!(f, "{} events, no violations", self.events);
        }
        writeln!(f, "{} events, {} violations", self.events, self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  [{}] {}: {}", v.index, v.kind, v.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Tenure {
    holder: NodeId,
    start: u64,
    index: usize,
}

#[derive(Debug, Default)]
struct PageState {
    writer: Option<Tenure>,
    /// Invalidations sent and not yet acknowledged, per reader.
    unacked: BTreeMap<NodeId, u32>,
    /// Copy/handoff requests delivered to each node and not yet answered.
    requests: HashMap<NodeId, u32>,
    /// Writers in order of their first request for the current episode.
    waiting: Vec<NodeId>,
    /// Start of each node's latest tenure.
    last_start: HashMap<NodeId, u64>,
}

#[derive(Debug, Default)]
struct BarrierLog {
    expected: u32,
    arrivals: Vec<NodeId>,
}

#[derive(Default)]
struct Checker {
    pages: HashMap<u64, PageState>,
    locks: HashMap<u64, NodeId>,
    barriers: HashMap<u64, BarrierLog>,
    found: Vec<Violation>,
}

pub fn check_trace(trace: &Trace) -> CheckReport {
    let mut order: Vec<(u64, u8, u64, u64, usize)> = Vec::with_capacity(trace.events.len() * 2);
    for (i, e) in trace.events.iter().enumerate() {
        order.push((e.time, 0, i as u64, 0, i));
        order.push((e.sent, 1, u64::from(e.src.to_wire()), e.seq, i));
    }
    order.sort_unstable();
    let mut ck = Checker::default();
    for (_, phase, _, _, i) in order {
        let e = &trace.events[i];
        if phase == 0 {
            ck.delivered(e, i);
        } else {
            ck.sent(trace, e, i);
        }
    }
    ck.found.sort_by_key(|v| (v.index, v.kind));
    CheckReport {
        events: trace.events.len(),
        violations: ck.found,
    }
}

impl Checker {
    fn flag(&mut self, kind: ViolationKind, index: usize, detail: String) {
        self.found.push(Violation { kind, index, detail });
    }

    fn delivered(&mut self, e: &TraceEvent, i: usize) {
        use KindTag::*;
        match e.kind {
            WriteGrant | PrivilegeTransfer => self.tenure_start(e.dst, e, i),
            HandoffReq if e.src.is_server() && e.arg_node() == Some(e.dst) => {
                self.tenure_start(e.dst, e, i)
            }
            HandoffReq | CopyReq if e.dst.is_compute() => {
                *self.page(e.page).requests.entry(e.dst).or_default() += 1;
            }
            WriteReq if e.dst.is_server() => {
                let p = self.page(e.page);
                // a retry that crossed its own grant in flight
                let stale = p.last_start.get(&e.src).is_some_and(|t| e.sent < *t);
                let is_writer = p.writer.is_some_and(|t| t.holder == e.src);
                if !stale && !is_writer && !p.waiting.contains(&e.src) {
                    p.waiting.push(e.src);
                }
            }
            InvalidateAck => {
                let p = self.page(e.page);
                if let Some(n) = p.unacked.get_mut(&e.src) {
                    *n = n.saturating_sub(1);
                    if *n == 0 {
                        p.unacked.remove(&e.src);
                    }
                }
            }
            LockGrant => {
                if let Some(h) = self.locks.get(&e.page).copied() {
                    if h != e.dst {
                        self.flag(
                            ViolationKind::MutualExclusion,
                            i,
                            format!("lock {} granted to {} while held by {h}", e.page, e.dst),
                        );
                    }
                }
                self.locks.insert(e.page, e.dst);
            }
            BarrierEnter => {
                let b = self.barriers.entry(e.page).or_default();
                if let Some(x) = e.arg_u64() {
                    b.expected = x as u32;
                }
                b.arrivals.push(e.src);
            }
            _ => {}
        }
    }

    fn sent(&mut self, trace: &Trace, e: &TraceEvent, i: usize) {
        use KindTag::*;
        match e.kind {
            Invalidate => *self.page(e.page).unacked.entry(e.dst).or_default() += 1,
            WriteGrant | PrivilegeTransfer => {
                let p = self.page(e.page);
                if let Some((n, _)) = p.unacked.iter().next() {
                    let detail = format!("{} sent to {} with invalidation of {n} unacknowledged", e.kind, e.dst);
                    self.flag(ViolationKind::GrantSafety, i, detail);
                }
                if e.kind == PrivilegeTransfer {
                    self.relinquish(trace, e, i);
                }
            }
            Downgrade => self.relinquish(trace, e, i),
            Writeback => {
                let p = self.page(e.page);
                if p.writer.is_some_and(|t| t.holder == e.src) {
                    p.writer = None;
                }
                p.requests.remove(&e.src);
            }
            Nack | PageData if e.src.is_compute() => {
                let p = self.page(e.page);
                let serving_as_writer = e.kind == PageData && p.writer.is_some_and(|t| t.holder == e.src);
                if !serving_as_writer {
                    if let Some(n) = p.requests.get_mut(&e.src) {
                        *n = n.saturating_sub(1);
                    }
                }
            }
            LockRelease => {
                if self.locks.get(&e.page) == Some(&e.src) {
                    self.locks.remove(&e.page);
                }
            }
            BarrierRelease => {
                let Some(epoch) = e.arg_u64() else { return };
                let b = self.barriers.entry(e.page).or_default();
                let need = (epoch as usize + 1) * b.expected as usize;
                let lo = epoch as usize * b.expected as usize;
                let ok = b.expected > 0
                    && b.arrivals.len() >= need
                    && b.arrivals[lo..need].contains(&e.dst);
                if !ok {
                    let detail = format!(
                        "barrier {} epoch {epoch} released to {} after {} of {} arrivals",
                        e.page,
                        e.dst,
                        b.arrivals.len().saturating_sub(lo),
                        b.expected
                    );
                    self.flag(ViolationKind::BarrierSafety, i, detail);
                }
            }
            _ => {}
        }
    }

    fn page(&mut self, page: u64) -> &mut PageState {
        self.pages.entry(page).or_default()
    }

    fn tenure_start(&mut self, node: NodeId, e: &TraceEvent, i: usize) {
        let p = self.page(e.page);
        let prior = p.writer;
        let mut jumped = None;
        if let Some(pos) = p.waiting.iter().position(|n| *n == node) {
            if pos > 0 {
                jumped = Some(p.waiting[0]);
            }
            p.waiting.remove(pos);
        }
        p.writer = Some(Tenure {
            holder: node,
            start: e.time,
            index: i,
        });
        p.requests.remove(&node);
        p.last_start.insert(node, e.time);
        if let Some(t) = prior.filter(|t| t.holder != node) {
            let detail = format!(
                "page {}: {node} gains write privilege while {} holds it since event {}",
                e.page, t.holder, t.index
            );
            self.flag(ViolationKind::SingleWriter, i, detail);
        }
        if let Some(first) = jumped {
            let detail = format!("page {}: {node} acquired before earlier requester {first}", e.page);
            self.flag(ViolationKind::FifoQueue, i, detail);
        }
    }

    /// `e` is a PrivilegeTransfer or Downgrade sent by `e.src`.
    fn relinquish(&mut self, trace: &Trace, e: &TraceEvent, i: usize) {
        let slice = trace.slice_ns;
        let skew = trace.skew_of(e.src);
        let p = self.page(e.page);
        let asked = p.requests.remove(&e.src).unwrap_or(0) > 0;
        let tenure = p.writer.filter(|t| t.holder == e.src);
        if tenure.is_some() {
            p.writer = None;
        }
        if !asked {
            let detail = format!("page {}: {} gave up privilege unrequested", e.page, e.src);
            self.flag(ViolationKind::SpontaneousRelinquish, i, detail);
        }
        if let Some(t) = tenure {
            let held = skew.local(e.sent) - skew.local(t.start);
            if held < slice {
                let detail = format!(
                    "page {}: {} relinquished after {held}ns local (granted at event {}), slice {slice}ns",
                    e.page, e.src, t.index
                );
                self.flag(ViolationKind::Slice, i, detail);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(slice_ns: i64, lines: &[&str]) -> Trace {
        Trace {
            slice_ns,
            skews: Vec::new(),
            events: lines.iter().map(|l| l.parse().unwrap()).collect(),
        }
    }

    #[test]
    fn clean_handoff() {
        let t = trace(
            1000,
            &[
                "10\tc0\ts0\tWriteReq\t0\t0\t0\t0\t-",
                "20\ts0\tc0\tWriteGrant\t0\t0\t10\t64\t-",
                "30\tc1\ts0\tWriteReq\t0\t0\t20\t0\t-",
                "40\ts0\tc1\tRedirect\t0\t1\t30\t0\tc0/w",
                "50\tc1\tc0\tHandoffReq\t0\t1\t40\t0\t-",
                "1030\tc0\tc1\tPrivilegeTransfer\t0\t1\t1020\t64\t-",
                "1030\tc0\ts0\tTransferNotice\t0\t2\t1020\t0\tc1",
            ],
        );
        let r = check_trace(&t);
        assert!(r.is_clean(), "{r}");
    }

    #[test]
    fn early_transfer_flags_slice() {
        let t = trace(
            1000,
            &[
                "20\ts0\tc0\tWriteGrant\t0\t0\t10\t64\t-",
                "50\tc1\tc0\tHandoffReq\t0\t1\t40\t0\t-",
                "70\tc0\tc1\tPrivilegeTransfer\t0\t1\t60\t64\t-",
            ],
        );
        let r = check_trace(&t);
        assert_eq!(r.machine_lines(), "VIOLATION slice 2\n");
    }

    #[test]
    fn unrequested_downgrade_flagged() {
        let t = trace(
            10,
            &["20\ts0\tc0\tWriteGrant\t0\t0\t10\t64\t-", "90\tc0\ts0\tDowngrade\t0\t0\t80\t0\t-"],
        );
        assert!(check_trace(&t).has(ViolationKind::SpontaneousRelinquish));
    }

    #[test]
    fn slice_measured_on_holder_clock() {
        // c0 runs at double rate: 500 global ns are 1000 local ns.
        let mut t = trace(
            1000,
            &[
                "0\ts0\tc0\tWriteGrant\t0\t0\t0\t64\t-",
                "10\tc1\tc0\tHandoffReq\t0\t1\t0\t0\t-",
                "600\tc0\tc1\tPrivilegeTransfer\t0\t1\t500\t64\t-",
            ],
        );
        t.skews.push((NodeId::compute(0), crate::clock::ClockSkew::new(0, 2.0)));
        assert!(check_trace(&t).is_clean());
        t.skews[0].1 = crate::clock::ClockSkew::new(0, 1.0);
        assert!(check_trace(&t).has(ViolationKind::Slice));
    }

    #[test]
    fn queue_jump_flagged() {
        let t = trace(
            10,
            &[
                "5\tc0\ts0\tWriteReq\t0\t0\t0\t0\t-",
                "6\ts0\tc0\tWriteGrant\t0\t0\t5\t64\t-",
                "10\tc1\ts0\tWriteReq\t0\t0\t0\t0\t-",
                "11\tc2\ts0\tWriteReq\t0\t0\t0\t0\t-",
                "30\tc0\ts0\tWriteback\t0\t1\t20\t64\t-",
                "40\ts0\tc2\tWriteGrant\t0\t1\t30\t64\t-",
            ],
        );
        let r = check_trace(&t);
        assert_eq!(r.machine_lines(), "VIOLATION fifo-queue 5\n");
    }

    #[test]
    fn grant_with_outstanding_ack_flagged() {
        let t = trace(
            10,
            &[
                "10\ts0\tc2\tInvalidate\t0\t0\t0\t0\t-",
                "15\ts0\tc1\tWriteGrant\t0\t1\t5\t64\t-",
                "20\tc2\ts0\tInvalidateAck\t0\t0\t10\t0\t-",
            ],
        );
        assert!(check_trace(&t).has(ViolationKind::GrantSafety));
    }

    #[test]
    fn sync_violations() {
        let t = trace(
            10,
            &[
                "1\ts0\tc0\tLockGrant\t7\t0\t0\t0\t-",
                "2\ts0\tc1\tLockGrant\t7\t1\t1\t0\t-",
                "3\tc0\ts0\tBarrierEnter\t9\t0\t2\t0\t2",
                "4\ts0\tc0\tBarrierRelease\t9\t2\t3\t0\t0",
            ],
        );
        let r = check_trace(&t);
        assert!(r.has(ViolationKind::MutualExclusion));
        assert!(r.has(ViolationKind::BarrierSafety));
    }
}
