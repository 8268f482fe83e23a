//! Seeded workload generator.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::GasConfig;
use crate::protocol::AppCall;

/// Per-node call lists, each issued in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Workload {
    pub per_node: Vec<Vec<AppCall>>,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.per_node.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mix {
    /// Mostly unsynchronized reads over the whole space.
    ReadHeavy,
    /// Unsynchronized writes concentrated on a few shared pages.
    WriteContended,
    /// Every access inside a critical section of the page's lock.
    LockProtected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub mix: Mix,
    pub nodes: u16,
    /// Each round ends with a barrier across all nodes.
    pub rounds: u32,
    pub ops_per_round: u32,
    /// Size of the shared page pool for contended mixes.
    pub hot_pages: u32,
    pub max_len: u64,
    pub page_size: u64,
    pub gas_size: u64,
}

impl Profile {
    pub fn new(mix: Mix, gas: &GasConfig) -> Self {
        Self {
            mix,
            nodes: gas.num_computes,
            rounds: 3,
            ops_per_round: 4,
            hot_pages: 8,
            max_len: 64,
            page_size: gas.page_size,
            gas_size: gas.gas_size,
        }
    }

    pub fn lock_protected(gas: &GasConfig) -> Self {
        Self::new(Mix::LockProtected, gas)
    }

    pub fn write_contended(gas: &GasConfig) -> Self {
        Self::new(Mix::WriteContended, gas)
    }

    pub fn read_heavy(gas: &GasConfig) -> Self {
        Self::new(Mix::ReadHeavy, gas)
    }
}

/// Barrier id used for round boundaries.
pub const ROUND_BARRIER: u64 = 0;

pub fn gen_workload(seed: u64, profile: &Profile) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = profile.gas_size / profile.page_size;
    let hot: Vec<u64> = {
        let n = (profile.hot_pages as u64).clamp(1, pages) as usize;
        let mut v: Vec<u64> = sample(&mut rng, pages as usize, n).into_iter().map(|p| p as u64).collect();
        v.sort_unstable();
        v
    };
    let mut per_node = vec![Vec::new(); profile.nodes as usize];
    for _round in 0..profile.rounds {
        for ops in per_node.iter_mut() {
            for k in 0..profile.ops_per_round {
                match profile.mix {
                    Mix::LockProtected => {
                        let page = hot[rng.gen_range(0..hot.len())];
                        ops.push(AppCall::Lock(page));
                        for _ in 0..rng.gen_range(1..=3) {
                            ops.push(access(&mut rng, profile, page));
                        }
                        ops.push(AppCall::Unlock(page));
                    }
                    Mix::WriteContended => {
                        // the first op of every node hits the same page
                        let page = if k == 0 { hot[0] } else { hot[rng.gen_range(0..hot.len())] };
                        ops.push(write_in(&mut rng, profile, page));
                    }
                    Mix::ReadHeavy => {
                        let page = rng.gen_range(0..pages);
                        if rng.gen_bool(0.9) {
                            ops.push(read_in(&mut rng, profile, page));
                        } else {
                            ops.push(write_in(&mut rng, profile, page));
                        }
                    }
                }
            }
            ops.push(AppCall::Barrier {
                id: ROUND_BARRIER,
                expected: u32::from(profile.nodes),
            });
        }
    }
    Workload { per_node }
}

fn span(rng: &mut ChaCha8Rng, profile: &Profile, page: u64) -> (u64, u64) {
    let start = page * profile.page_size;
    let off = rng.gen_range(0..profile.page_size);
    let len = rng.gen_range(1..=profile.max_len).min(profile.page_size - off);
    (start + off, len)
}

fn read_in(rng: &mut ChaCha8Rng, profile: &Profile, page: u64) -> AppCall {
    let (addr, len) = span(rng, profile, page);
    AppCall::Read { addr, len }
}

fn write_in(rng: &mut ChaCha8Rng, profile: &Profile, page: u64) -> AppCall {
    let (addr, len) = span(rng, profile, page);
    let bytes = (0..len).map(|_| rng.gen()).collect();
    AppCall::Write { addr, bytes }
}

fn access(rng: &mut ChaCha8Rng, profile: &Profile, page: u64) -> AppCall {
    match rng.gen_range(0..3) {
        0 => read_in(rng, profile, page),
        1 => write_in(rng, profile, page),
        _ if profile.page_size >= 8 => {
            let slot = rng.gen_range(0..profile.page_size / 8);
            AppCall::FetchAdd {
                addr: page * profile.page_size + slot * 8,
                delta: rng.gen_range(1..1000),
            }
        }
        _ => write_in(rng, profile, page),
    }
}
