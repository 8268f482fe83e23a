//! Deterministic virtual-time cluster: every node in one process, one global
//! event queue, per-node clock skew, and a delivered-message trace.

pub mod check;
pub mod oracle;
pub mod trace;
pub mod workload;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::ClockSkew;
use crate::directory::PageStatus;
use crate::error::{Error, Result};
use crate::geometry::{GasConfig, NodeId, PageId};
use crate::message::Message;
use crate::protocol::{AppCall, CallOutcome, ComputeNode, Envelope, Output, ServerNode};
use crate::transport::LatencyModel;

pub use check::{check_trace, CheckReport, Violation, ViolationKind};
pub use oracle::serial_oracle;
pub use trace::{Trace, TraceEvent};
pub use workload::{gen_workload, Profile, Workload};

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub gas: GasConfig,
    pub latency: LatencyModel,
    /// Clock of compute node `i` is `skews[i]`; missing entries are exact.
    pub skews: Vec<ClockSkew>,
    /// Upper bound of the seeded extra delay added to each message.
    pub jitter_ns: u64,
    /// Aborts runaway runs.
    pub max_events: u64,
}

impl SimConfig {
    pub fn new(gas: GasConfig) -> Self {
        Self {
            gas,
            latency: LatencyModel::default(),
            skews: Vec::new(),
            jitter_ns: 2_000,
            max_events: 20_000_000,
        }
    }

    pub fn skew(&self, node: NodeId) -> ClockSkew {
        if node.is_compute() {
            self.skews.get(node.index as usize).copied().unwrap_or_default()
        } else {
            ClockSkew::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: u64,
    dst: NodeId,
    src: NodeId,
    seq: u64,
    /// Separates local events from messages with equal keys.
    class: u8,
}

#[derive(Debug)]
enum Payload {
    Deliver { msg: Message, sent: u64 },
    Timer(PageId),
    Resume,
}

/// Results of one compute node's completed calls, in issue order.
pub type Outcomes = Vec<CallOutcome>;

pub struct Cluster {
    cfg: SimConfig,
    gas: Arc<GasConfig>,
    servers: Vec<ServerNode>,
    computes: Vec<ComputeNode>,
    queue: BinaryHeap<Reverse<(Key, u64)>>,
    payloads: HashMap<u64, Payload>,
    next_event: u64,
    local_seq: u64,
    last_delivery: HashMap<(NodeId, NodeId), u64>,
    rng: ChaCha8Rng,
    now: u64,
    processed: u64,
    trace: Trace,
    /// Calls still to issue, per compute node.
    pending: Vec<VecDeque<AppCall>>,
    outcomes: Vec<Outcomes>,
    done_at: Vec<Option<u64>>,
}

impl Cluster {
    pub fn new(cfg: SimConfig, seed: u64) -> Result<Self> {
        let gas = Arc::new(cfg.gas.clone().validated()?);
        cfg.latency.validate()?;
        let servers = gas.servers().map(|s| ServerNode::new(s, gas.clone())).collect();
        let computes: Vec<_> = gas
            .computes()
            .map(|c| ComputeNode::new(c, gas.clone(), cfg.latency.clone()))
            .collect();
        let n = computes.len();
        let skews = gas
            .computes()
            .map(|c| (c, cfg.skew(c)))
            .filter(|(_, s)| *s != ClockSkew::default())
            .collect();
        Ok(Self {
            trace: Trace {
                slice_ns: gas.slice_ns(),
                skews,
                events: Vec::new(),
            },
            cfg,
            gas,
            servers,
            computes,
            queue: BinaryHeap::new(),
            payloads: HashMap::new(),
            next_event: 0,
            local_seq: 0,
            last_delivery: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            processed: 0,
            pending: vec![VecDeque::new(); n],
            outcomes: vec![Vec::new(); n],
            done_at: vec![None; n],
        })
    }

    pub fn config(&self) -> &GasConfig {
        &self.gas
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Trace {
        Trace {
            slice_ns: self.trace.slice_ns,
            skews: self.trace.skews.clone(),
            events: std::mem::take(&mut self.trace.events),
        }
    }

    pub fn server(&self, i: u16) -> &ServerNode {
        &self.servers[i as usize]
    }

    pub fn compute(&self, i: u16) -> &ComputeNode {
        &self.computes[i as usize]
    }

    pub fn outcomes(&self, i: u16) -> &[CallOutcome] {
        &self.outcomes[i as usize]
    }

    /// Virtual time at which compute `i` finished its last queued call.
    pub fn finished_at(&self, i: u16) -> Option<u64> {
        self.done_at[i as usize]
    }

    fn local_now(&self, node: NodeId) -> i64 {
        self.cfg.skew(node).local(self.now)
    }

    fn push(&mut self, key: Key, payload: Payload) {
        let id = self.next_event;
        self.next_event += 1;
        self.payloads.insert(id, payload);
        self.queue.push(Reverse((key, id)));
    }

    fn send(&mut self, env: Envelope) -> Result<()> {
        let Envelope { dst, msg } = env;
        if !self.gas.contains(dst) {
            return Err(Error::Transport(format!("unknown destination {dst}")));
        }
        let jitter = if self.cfg.jitter_ns > 0 {
            self.rng.gen_range(0..=self.cfg.jitter_ns)
        } else {
            0
        };
        let model = self.cfg.latency.delivery_time(self.now, msg.payload_len()) + jitter;
        let pair = (msg.src, dst);
        let at = model.max(self.last_delivery.get(&pair).copied().unwrap_or(0));
        self.last_delivery.insert(pair, at);
        let key = Key {
            time: at,
            dst,
            src: msg.src,
            seq: msg.seq,
            class: 0,
        };
        self.push(key, Payload::Deliver { msg, sent: self.now });
        Ok(())
    }

    fn local_event(&mut self, node: NodeId, at: u64, payload: Payload) {
        self.local_seq += 1;
        let key = Key {
            time: at,
            dst: node,
            src: node,
            seq: self.local_seq,
            class: 1,
        };
        self.push(key, payload);
    }

    fn apply(&mut self, node: NodeId, outputs: Vec<Output>) -> Result<()> {
        for o in outputs {
            match o {
                Output::Send(env) => self.send(env)?,
                Output::Timer { page, deadline } => {
                    let at = self.cfg.skew(node).global_at(deadline, self.now);
                    self.local_event(node, at, Payload::Timer(page));
                }
                Output::Busy { ns } => self.local_event(node, self.now + ns, Payload::Resume),
                Output::Done(outcome) => {
                    let i = node.index as usize;
                    self.outcomes[i].push(outcome);
                    self.done_at[i] = Some(self.now);
                    self.issue_next(node)?;
                }
            }
        }
        Ok(())
    }

    fn issue_next(&mut self, node: NodeId) -> Result<()> {
        let i = node.index as usize;
        if !self.computes[i].is_idle() {
            return Ok(());
        }
        if let Some(call) = self.pending[i].pop_front() {
            let now = self.local_now(node);
            let out = self.computes[i].start_call(call, now)?;
            self.apply(node, out)?;
        }
        Ok(())
    }

    /// Queues calls for compute `i`; they run back to back from the current
    /// virtual time once the event loop runs.
    pub fn submit(&mut self, i: u16, calls: impl IntoIterator<Item = AppCall>) -> Result<()> {
        let node = NodeId::compute(i);
        if i >= self.gas.num_computes {
            return Err(Error::Transport(format!("unknown node {node}")));
        }
        self.pending[i as usize].extend(calls);
        self.issue_next(node)
    }

    /// Processes one event. Returns false once the queue is empty.
    pub fn step(&mut self) -> Result<bool> {
        let Some(Reverse((key, id))) = self.queue.pop() else {
            return Ok(false);
        };
        self.processed += 1;
        if self.processed > self.cfg.max_events {
            return Err(Error::Deadlock(format!(
                "event limit {} reached at t={}",
                self.cfg.max_events, self.now
            )));
        }
        debug_assert!(key.time >= self.now, "time travel");
        self.now = key.time;
        let payload = self.payloads.remove(&id).expect("payload");
        let node = key.dst;
        match payload {
            Payload::Deliver { msg, sent } => {
                self.trace.events.push(TraceEvent::delivered(&msg, node, sent, self.now));
                if node.is_server() {
                    let out = self.servers[node.index as usize].handle(msg)?;
                    for env in out {
                        self.send(env)?;
                    }
                } else {
                    let now = self.local_now(node);
                    let out = self.computes[node.index as usize].handle(msg, now)?;
                    self.apply(node, out)?;
                }
            }
            Payload::Timer(page) => {
                let now = self.local_now(node);
                let out = self.computes[node.index as usize].on_timer(page, now)?;
                self.apply(node, out)?;
            }
            Payload::Resume => {
                let now = self.local_now(node);
                let out = self.computes[node.index as usize].resume(now)?;
                self.apply(node, out)?;
            }
        }
        Ok(true)
    }

    /// Runs to quiescence; unfinished calls at that point are a deadlock.
    pub fn run_to_quiescence(&mut self) -> Result<()> {
        while self.step()? {}
        let report = self.blocked_report();
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::Deadlock(report))
        }
    }

    /// Runs until compute `i` has no call in progress or queued.
    pub fn run_until_idle(&mut self, i: u16) -> Result<()> {
        let idx = i as usize;
        while !(self.computes[idx].is_idle() && self.pending[idx].is_empty()) {
            if !self.step()? {
                return Err(Error::Deadlock(self.blocked_report()));
            }
        }
        Ok(())
    }

    /// Issues one call on compute `i` and runs until it completes.
    /// Returns the outcome and the elapsed virtual time.
    pub fn call(&mut self, i: u16, call: AppCall) -> Result<(CallOutcome, u64)> {
        self.run_until_idle(i)?;
        let start = self.now;
        let before = self.outcomes[i as usize].len();
        self.submit(i, [call])?;
        self.run_until_idle(i)?;
        let outcome = self.outcomes[i as usize]
            .get(before)
            .cloned()
            .ok_or_else(|| Error::Deadlock("call produced no outcome".into()))?;
        Ok((outcome, self.done_at[i as usize].unwrap_or(start) - start))
    }

    /// Lists blocked calls, one per line; empty when nothing is blocked.
    pub fn blocked_report(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.computes.iter().enumerate() {
            if let Some(d) = c.describe_call() {
                let _ = writeln!(s, "c{i}: {d}; {} more queued", self.pending[i].len());
            } else if !self.pending[i].is_empty() {
                let _ = writeln!(s, "c{i}: {} calls never issued", self.pending[i].len());
            }
        }
        s
    }

    /// Assembles the current contents of every page from the directory and
    /// the latest-copy holders.
    pub fn image(&self) -> Result<Vec<u8>> {
        let ps = self.gas.page_size as usize;
        let mut img = vec![0u8; self.gas.gas_size as usize];
        for s in &self.servers {
            for (page, view) in s.pages() {
                let src = match view.entry.status {
                    PageStatus::Current => &view.entry.server_copy,
                    PageStatus::CurrentOnCompute(h) | PageStatus::WriteLocked(h) => {
                        &self.computes[h.index as usize]
                            .cached(page)
                            .ok_or_else(|| Error::Oracle(format!("{h} lost latest copy of page {page}")))?
                            .data
                    }
                };
                let off = page.0 as usize * ps;
                img[off..off + ps].copy_from_slice(src);
            }
        }
        Ok(img)
    }

    /// After quiescence the directory reader sets must match the caches.
    pub fn check_reader_sets(&self) -> Result<()> {
        for s in &self.servers {
            for (page, view) in s.pages() {
                let mut cached: Vec<NodeId> = self
                    .computes
                    .iter()
                    .filter(|c| c.cached(page).is_some_and(|p| p.privilege == crate::protocol::Privilege::Read))
                    .map(|c| c.id())
                    .collect();
                cached.sort();
                let listed: Vec<NodeId> = view.entry.readers.iter().copied().collect();
                if cached != listed {
                    return Err(Error::Oracle(format!(
                        "page {page}: readers {listed:?} but cached at {cached:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything a workload run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: Vec<u8>,
    pub trace: Trace,
    pub outcomes: Vec<Outcomes>,
    pub end_time: u64,
}

/// Runs `workload` to completion. Identical inputs give an identical trace.
pub fn run(cfg: &SimConfig, workload: &Workload, seed: u64) -> Result<RunOutput> {
    let mut cl = Cluster::new(cfg.clone(), seed)?;
    if workload.per_node.len() > cl.gas.num_computes as usize {
        return Err(Error::Config(format!(
            "workload has {} nodes, cluster has {} computes",
            workload.per_node.len(),
            cl.gas.num_computes
        )));
    }
    for (i, ops) in workload.per_node.iter().enumerate() {
        cl.submit(i as u16, ops.iter().cloned())?;
    }
    cl.run_to_quiescence()?;
    Ok(RunOutput {
        image: cl.image()?,
        end_time: cl.now,
        outcomes: cl.outcomes.clone(),
        trace: cl.take_trace(),
    })
}
