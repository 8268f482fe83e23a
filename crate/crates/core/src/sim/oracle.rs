//! Serial replay of a workload in the order a trace induces.
//!
//! Lock critical sections run in the trace's `LockGrant` order and barrier
//! epochs separate phases. Everything else runs lowest-node-first, which is
//! exact for data-race-free workloads (any order consistent with the
//! synchronization gives the same result) and one admissible interleaving
//! otherwise.

use std::collections::{HashMap, VecDeque};

use super::check::{check_trace, ViolationKind};
use super::trace::Trace;
use super::workload::Workload;
use super::Outcomes;
use crate::error::{Error, Result};
use crate::geometry::{GasConfig, NodeId};
use crate::message::KindTag;
use crate::protocol::{AppCall, CallOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleOutput {
    pub image: Vec<u8>,
    pub outcomes: Vec<Outcomes>,
}

pub fn serial_oracle(gas: &GasConfig, workload: &Workload, trace: &Trace) -> Result<OracleOutput> {
    let report = check_trace(trace);
    if let Some(v) = report
        .violations
        .iter()
        .find(|v| v.kind == ViolationKind::SingleWriter)
    {
        return Err(Error::Oracle(format!("trace event {}: {}", v.index, v.detail)));
    }

    let mut grants: HashMap<u64, VecDeque<NodeId>> = HashMap::new();
    for e in trace.events.iter().filter(|e| e.kind == KindTag::LockGrant) {
        grants.entry(e.page).or_default().push_back(e.dst);
    }

    let n = workload.per_node.len();
    let mut mem = vec![0u8; gas.gas_size as usize];
    let mut cursor = vec![0usize; n];
    let mut outcomes: Vec<Outcomes> = vec![Vec::new(); n];
    let mut holders: HashMap<u64, usize> = HashMap::new();
    // barrier id -> (epoch, nodes arrived in it)
    let mut barriers: HashMap<u64, (u64, Vec<usize>)> = HashMap::new();
    let mut arrived = vec![false; n];

    loop {
        let mut progressed = false;
        for i in 0..n {
            let Some(op) = workload.per_node[i].get(cursor[i]) else {
                continue;
            };
            let node = NodeId::compute(i as u16);
            let outcome = match op {
                AppCall::Read { addr, len } => {
                    Some(CallOutcome::Read(mem[*addr as usize..(addr + len) as usize].to_vec()))
                }
                AppCall::Write { addr, bytes } => {
                    mem[*addr as usize..*addr as usize + bytes.len()].copy_from_slice(bytes);
                    Some(CallOutcome::Written)
                }
                AppCall::FetchAdd { addr, delta } => {
                    let at = *addr as usize;
                    let prev = u64::from_le_bytes(mem[at..at + 8].try_into().unwrap());
                    mem[at..at + 8].copy_from_slice(&prev.wrapping_add(*delta).to_le_bytes());
                    Some(CallOutcome::Added { previous: prev })
                }
                AppCall::Flush => Some(CallOutcome::Flushed),
                AppCall::Lock(l) => {
                    let q = grants.entry(*l).or_default();
                    if !holders.contains_key(l) && q.front() == Some(&node) {
                        q.pop_front();
                        holders.insert(*l, i);
                        Some(CallOutcome::Locked)
                    } else {
                        None
                    }
                }
                AppCall::Unlock(l) => {
                    if holders.remove(l) != Some(i) {
                        return Err(Error::Oracle(format!("{node} unlocks {l} without holding it")));
                    }
                    Some(CallOutcome::Unlocked)
                }
                AppCall::Barrier { id, expected } => {
                    if !arrived[i] {
                        arrived[i] = true;
                        progressed = true;
                        let (epoch, nodes) = barriers.entry(*id).or_default();
                        nodes.push(i);
                        if nodes.len() == *expected as usize {
                            let e = *epoch;
                            *epoch += 1;
                            for j in std::mem::take(nodes) {
                                arrived[j] = false;
                                cursor[j] += 1;
                                outcomes[j].push(CallOutcome::BarrierPassed { epoch: e });
                            }
                        }
                    }
                    None
                }
            };
            if let Some(o) = outcome {
                outcomes[i].push(o);
                cursor[i] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    if let Some(i) = (0..n).find(|&i| cursor[i] < workload.per_node[i].len()) {
        return Err(Error::Oracle(format!(
            "c{i} cannot proceed past {:?} in the trace's order",
            workload.per_node[i][cursor[i]]
        )));
    }
    Ok(OracleOutput { image: mem, outcomes })
}
