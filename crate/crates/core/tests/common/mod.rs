#![allow(dead_code)]

use std::path::PathBuf;

use dsm_core::geometry::NodeId;
use dsm_core::message::{KindTag, Message, MsgKind};
use dsm_core::protocol::AppCall;
use dsm_core::sim::{Cluster, SimConfig, Trace, TraceEvent};
use dsm_core::GasConfig;
use rand::Rng;

pub fn fixture(name: &str) -> Trace {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Trace::parse(&text).unwrap()
}

/// Fixture file and the violation it must raise.
pub const NEGATIVE_FIXTURES: [(&str, &str); 5] = [
    ("single_writer.trace", "single-writer"),
    ("grant_before_ack.trace", "grant-safety"),
    ("early_transfer.trace", "slice"),
    ("lock_overlap.trace", "mutual-exclusion"),
    ("early_barrier.trace", "barrier-safety"),
];

fn node(rng: &mut impl Rng) -> NodeId {
    NodeId::from_wire(rng.gen())
}

fn page(rng: &mut impl Rng) -> Vec<u8> {
    let len = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=4096) };
    (0..len).map(|_| rng.gen()).collect()
}

pub fn random_message(rng: &mut impl Rng) -> Message {
    let kind = match rng.gen_range(0..20) {
        0 => MsgKind::ReadReq,
        1 => MsgKind::WriteReq,
        2 => MsgKind::PageData(page(rng)),
        3 => MsgKind::WriteGrant(page(rng)),
        4 => MsgKind::Redirect {
            target: node(rng),
            write: rng.gen(),
        },
        5 => MsgKind::Invalidate,
        6 => MsgKind::InvalidateAck,
        7 => MsgKind::CopyReq,
        8 => MsgKind::HandoffReq {
            on_behalf: rng.gen_bool(0.5).then(|| node(rng)),
        },
        9 => MsgKind::PrivilegeTransfer(page(rng)),
        10 => MsgKind::TransferNotice { new_writer: node(rng) },
        11 => MsgKind::Writeback(page(rng)),
        12 => MsgKind::WritebackAck,
        13 => MsgKind::BarrierEnter { expected: rng.gen() },
        14 => MsgKind::BarrierRelease { epoch: rng.gen() },
        15 => MsgKind::LockReq,
        16 => MsgKind::LockGrant,
        17 => MsgKind::LockRelease,
        18 => MsgKind::Downgrade,
        _ => if rng.gen() { MsgKind::ReaderDrop } else { MsgKind::Nack },
    };
    Message {
        kind,
        page: rng.gen(),
        src: node(rng),
        seq: rng.gen(),
    }
}

pub fn c(i: u16) -> NodeId {
    NodeId::compute(i)
}

/// Noise-free cluster for scripted scenarios.
pub fn quiet_cluster(gas: GasConfig) -> Cluster {
    let mut cfg = SimConfig::new(gas);
    cfg.jitter_ns = 0;
    Cluster::new(cfg, 0).unwrap()
}

pub fn call(cl: &mut Cluster, i: u16, call: AppCall) {
    cl.call(i, call).unwrap();
    cl.run_to_quiescence().unwrap();
}

/// Events logged after `mark`, in the order they were sent.
pub fn sent_order(cl: &Cluster, mark: usize) -> Vec<TraceEvent> {
    let mut ev = cl.trace().events[mark..].to_vec();
    ev.sort_by_key(|e| (e.sent, e.src.to_wire(), e.seq));
    ev
}

pub fn kinds(ev: &[TraceEvent]) -> Vec<KindTag> {
    ev.iter().map(|e| e.kind).collect()
}

pub struct Scenario {
    pub name: &'static str,
    pub expected: Vec<KindTag>,
    pub observed: Vec<TraceEvent>,
    /// Extra condition beyond the message sequence, if any failed.
    pub problem: Option<String>,
}

impl Scenario {
    pub fn passed(&self) -> bool {
        self.problem.is_none() && kinds(&self.observed) == self.expected
    }
}

const W: fn(u64) -> AppCall = |addr| AppCall::Write { addr, bytes: vec![7] };
const R: fn(u64) -> AppCall = |addr| AppCall::Read { addr, len: 1 };

/// Page 0 at the server: read served from the server copy.
pub fn scenario_read_current() -> Scenario {
    let mut cl = quiet_cluster(GasConfig::default());
    call(&mut cl, 0, R(0));
    Scenario {
        name: "read of a server-current page",
        expected: vec![KindTag::ReadReq, KindTag::PageData],
        observed: sent_order(&cl, 0),
        problem: None,
    }
}

/// Page 0 held for writing by c1; c0 reads it from the holder.
pub fn scenario_read_redirect() -> Scenario {
    let mut cl = quiet_cluster(GasConfig::default());
    call(&mut cl, 1, W(0));
    let mark = cl.trace().events.len();
    call(&mut cl, 0, R(0));
    let observed: Vec<TraceEvent> = sent_order(&cl, mark)
        .into_iter()
        .filter(|e| e.src == c(0) || e.dst == c(0))
        .collect();
    let problem = match observed.iter().find(|e| e.kind == KindTag::CopyReq) {
        Some(e) if e.dst != c(1) => Some(format!("copy request went to {}", e.dst)),
        _ => None,
    };
    Scenario {
        name: "read redirected to the latest-copy holder",
        expected: vec![KindTag::ReadReq, KindTag::Redirect, KindTag::CopyReq, KindTag::PageData],
        observed,
        problem,
    }
}

/// c1 and c2 read page 0, then c0 writes it.
pub fn scenario_write_invalidate() -> Scenario {
    let mut cl = quiet_cluster(GasConfig::default());
    call(&mut cl, 1, R(0));
    call(&mut cl, 2, R(0));
    let mark = cl.trace().events.len();
    call(&mut cl, 0, W(0));
    let observed = sent_order(&cl, mark);
    let granted_after_acks = observed
        .iter()
        .filter(|e| e.kind == KindTag::InvalidateAck)
        .map(|e| e.time)
        .max()
        .zip(observed.iter().find(|e| e.kind == KindTag::WriteGrant).map(|e| e.sent))
        .is_some_and(|(last_ack, grant)| grant >= last_ack);
    use KindTag::*;
    Scenario {
        name: "write invalidates k=2 readers before the grant",
        expected: vec![WriteReq, Invalidate, Invalidate, InvalidateAck, InvalidateAck, WriteGrant],
        observed,
        problem: (!granted_after_acks).then(|| "grant sent before the last ack arrived".into()),
    }
}

/// c1 writes page 0, then c2 writes it: privilege moves at slice end.
pub fn scenario_write_handoff() -> Scenario {
    let gas = GasConfig::default();
    let slice = gas.slice_ns() as u64;
    let mut cl = quiet_cluster(gas);
    call(&mut cl, 1, W(0));
    let granted = cl
        .trace()
        .events
        .iter()
        .find(|e| e.kind == KindTag::WriteGrant && e.dst == c(1))
        .map(|e| e.time)
        .unwrap();
    let mark = cl.trace().events.len();
    call(&mut cl, 2, W(0));
    let observed = sent_order(&cl, mark);
    let problem = observed
        .iter()
        .find(|e| e.kind == KindTag::PrivilegeTransfer)
        .and_then(|e| (e.sent < granted + slice).then(|| format!("transfer at {} before slice end {}", e.sent, granted + slice)));
    use KindTag::*;
    Scenario {
        name: "write redirected to the writer, handed over at slice end",
        expected: vec![WriteReq, Redirect, HandoffReq, PrivilegeTransfer, TransferNotice],
        observed,
        problem,
    }
}

pub fn scenarios() -> Vec<Scenario> {
    vec![
        scenario_read_current(),
        scenario_read_redirect(),
        scenario_write_invalidate(),
        scenario_write_handoff(),
    ]
}
