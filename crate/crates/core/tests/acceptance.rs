//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p dsm-core --test acceptance`.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use dsm_core::bench::{self, BenchConfig, BenchOp};
use dsm_core::clock::ClockSkew;
use dsm_core::message::KindTag;
use dsm_core::protocol::{AppCall, CallOutcome, Privilege};
use dsm_core::sim::workload::ROUND_BARRIER;
use dsm_core::sim::{check_trace, gen_workload, run, serial_oracle, Profile, SimConfig, Trace, ViolationKind};
use dsm_core::transport::frame::{decode_frame, encode_frame, FrameDecoder, FrameError};
use dsm_core::{GasConfig, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario_conformance() -> Verdict {
    let t = Instant::now();
    let all = scenarios();
    let elapsed = t.elapsed();
    for s in &all {
        ensure(s.passed(), || {
            format!("{}: expected {:?}, got {:?} {:?}", s.name, s.expected, kinds(&s.observed), s.problem)
        })?;
    }
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("4/4 scenarios exact, {elapsed:.2?}"))
}

/// The 1000 lock-protected runs shared by the oracle and checker criteria.
struct OracleRuns {
    matched: usize,
    mismatches: Vec<u64>,
    dirty: Vec<(u64, String)>,
    elapsed: Duration,
}

fn oracle_runs() -> OracleRuns {
    let gas = GasConfig {
        num_computes: 4,
        num_servers: 2,
        ..GasConfig::default()
    };
    let cfg = SimConfig::new(gas.clone());
    let profile = Profile::lock_protected(&gas);
    let t = Instant::now();
    let mut r = OracleRuns {
        matched: 0,
        mismatches: Vec::new(),
        dirty: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..1000u64 {
        let w = gen_workload(seed, &profile);
        let out = match run(&cfg, &w, seed) {
            Ok(o) => o,
            Err(e) => {
                r.dirty.push((seed, e.to_string()));
                r.mismatches.push(seed);
                continue;
            }
        };
        let report = check_trace(&out.trace);
        if !report.is_clean() {
            r.dirty.push((seed, report.to_string()));
        }
        match serial_oracle(&gas, &w, &out.trace) {
            Ok(o) if o.image == out.image => r.matched += 1,
            _ => r.mismatches.push(seed),
        }
    }
    r.elapsed = t.elapsed();
    r
}

fn coherence_oracle(r: &OracleRuns) -> Verdict {
    ensure(r.mismatches.is_empty(), || {
        format!("{}/1000 matched; first mismatch seed {}", r.matched, r.mismatches[0])
    })?;
    ensure(r.elapsed < Duration::from_secs(120), || format!("took {:?}", r.elapsed))?;
    Ok(format!("1000/1000 images equal, {:.1?}", r.elapsed))
}

fn single_writer_grant_safety(r: &OracleRuns) -> Verdict {
    ensure(r.dirty.is_empty(), || {
        let (seed, why) = &r.dirty[0];
        format!("{} dirty runs; seed {seed}: {why}", r.dirty.len())
    })?;
    for (file, kind) in [("single_writer.trace", "single-writer"), ("grant_before_ack.trace", "grant-safety")] {
        let rep = check_trace(&fixture(file));
        ensure(rep.violations.iter().any(|v| v.kind.name() == kind), || {
            format!("{file} not flagged as {kind}: {rep}")
        })?;
    }
    Ok("0 violations in 1000 runs, both fixtures flagged".into())
}

/// Start of each write tenure by delivery: WriteGrant, PrivilegeTransfer, or
/// the owner asking a node to hand the page to itself.
fn tenure_start(e: &dsm_core::sim::TraceEvent) -> bool {
    matches!(e.kind, KindTag::WriteGrant | KindTag::PrivilegeTransfer)
        || (e.kind == KindTag::HandoffReq && e.src.is_server() && e.arg_node() == Some(e.dst))
}

/// Local hold times (ns) at every voluntary give-up of page `page`.
fn hold_times(trace: &Trace, page: u64) -> Vec<(NodeId, i64)> {
    let mut start: HashMap<NodeId, u64> = HashMap::new();
    let mut holds = Vec::new();
    let mut timeline: Vec<(u64, u8, usize)> = Vec::new();
    for (i, e) in trace.events.iter().enumerate().filter(|(_, e)| e.page == page) {
        timeline.push((e.time, 0, i));
        timeline.push((e.sent, 1, i));
    }
    timeline.sort();
    for (_, phase, i) in timeline {
        let e = &trace.events[i];
        if phase == 0 && tenure_start(e) {
            start.insert(e.dst, e.time);
        }
        if phase == 1 && matches!(e.kind, KindTag::PrivilegeTransfer | KindTag::Downgrade) {
            let sk = trace.skew_of(e.src);
            let began = start.remove(&e.src).expect("give-up without tenure");
            holds.push((e.src, sk.local(e.sent) - sk.local(began)));
        }
    }
    holds
}

fn slice_lower_bound() -> Verdict {
    let gas = GasConfig {
        num_computes: 2,
        slice_len: Duration::from_millis(1),
        ..GasConfig::default()
    };
    let slice = gas.slice_ns();
    let pages = 48u64;
    let rounds = 8u64;
    let mut transfers = 0;
    let mut tightest = i64::MAX;
    for offset in [-5_000_000i64, 0, 5_000_000] {
        for drift in [0.5, 1.0, 1.5] {
            let mut cfg = SimConfig::new(gas.clone());
            cfg.skews = vec![ClockSkew::new(offset, drift), ClockSkew::new(-offset, 2.0 - drift)];
            let per_node = (0..2u64)
                .map(|i| {
                    (0..rounds)
                        .flat_map(|r| {
                            let base = (1 + (i * rounds + r) * pages) * gas.page_size;
                            [
                                AppCall::Write { addr: 8 * i, bytes: vec![r as u8] },
                                AppCall::Read { addr: base, len: pages * gas.page_size },
                            ]
                        })
                        .collect()
                })
                .collect();
            let out = run(&cfg, &dsm_core::sim::Workload { per_node }, 0).map_err(|e| e.to_string())?;
            let holds = hold_times(&out.trace, 0);
            ensure(holds.len() >= 4, || format!("offset {offset} drift {drift}: only {} transfers", holds.len()))?;
            for (n, h) in &holds {
                ensure(*h >= slice, || format!("offset {offset} drift {drift}: {n} held {h}ns < {slice}ns"))?;
                tightest = tightest.min(*h);
            }
            let rep = check_trace(&out.trace);
            ensure(rep.is_clean(), || format!("offset {offset} drift {drift}: {rep}"))?;
            transfers += holds.len();
        }
    }
    Ok(format!("{transfers} transfers over 9 clock settings, min hold {tightest}ns >= {slice}ns"))
}

fn no_spontaneous_relinquish() -> Verdict {
    let gas = GasConfig {
        slice_len: Duration::from_millis(1),
        ..GasConfig::default()
    };
    let slice = gas.slice_ns() as u64;
    let mut cl = quiet_cluster(gas.clone());
    cl.call(0, AppCall::Write { addr: 0, bytes: vec![1] }).map_err(|e| e.to_string())?;
    let granted = cl.now();
    let mut next = 1u64;
    while cl.now() < granted + 12 * slice {
        cl.call(1, AppCall::Read { addr: next * gas.page_size, len: 1 }).map_err(|e| e.to_string())?;
        next += 1;
    }
    cl.run_to_quiescence().map_err(|e| e.to_string())?;
    let before = cl.trace().events.len();
    cl.call(0, AppCall::Write { addr: 1, bytes: vec![2] }).map_err(|e| e.to_string())?;
    let held = cl.now() - granted;
    let gave_up = cl
        .trace()
        .events
        .iter()
        .filter(|e| e.src == c(0) && e.page == 0)
        .filter(|e| {
            use KindTag::*;
            matches!(e.kind, PrivilegeTransfer | TransferNotice | Downgrade | Writeback)
        })
        .count();
    ensure(gave_up == 0, || format!("{gave_up} outgoing give-up messages"))?;
    ensure(cl.trace().events.len() == before, || "second write needed messages".into())?;
    let p = cl.compute(0).cached(dsm_core::PageId(0)).map(|p| p.privilege);
    ensure(p == Some(Privilege::Write), || format!("privilege now {p:?}"))?;
    Ok(format!("kept Write for {:.1} slices, 0 give-up messages", held as f64 / slice as f64))
}

fn fifo_write_queue() -> Verdict {
    let gas = GasConfig::default();
    let mut orders = BTreeSet::new();
    for seed in 0..100u64 {
        let per_node = (0..4u64).map(|i| vec![AppCall::Write { addr: 8 * i, bytes: vec![i as u8] }]).collect();
        let mut cfg = SimConfig::new(gas.clone());
        cfg.jitter_ns = 5_000;
        let out = run(&cfg, &dsm_core::sim::Workload { per_node }, seed).map_err(|e| e.to_string())?;
        let mut arrivals = Vec::new();
        let mut acquired = Vec::new();
        for e in out.trace.events.iter().filter(|e| e.page == 0) {
            if e.kind == KindTag::WriteReq && e.dst.is_server() && !arrivals.contains(&e.src) {
                arrivals.push(e.src);
            }
            if tenure_start(e) && !acquired.contains(&e.dst) {
                acquired.push(e.dst);
            }
        }
        ensure(acquired.len() == 4, || format!("seed {seed}: {} acquisitions", acquired.len()))?;
        ensure(acquired == arrivals, || format!("seed {seed}: arrived {arrivals:?}, acquired {acquired:?}"))?;
        ensure(!check_trace(&out.trace).has(ViolationKind::FifoQueue), || format!("seed {seed}: checker fifo"))?;
        orders.insert(arrivals);
    }
    Ok(format!("100/100 in arrival order ({} distinct orders)", orders.len()))
}

fn latency_invariance() -> Verdict {
    let cfg = BenchConfig::default();
    let samples = bench::run_latency_sweep(&cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 1.0;
    for &p in &cfg.page_sizes {
        for op in [BenchOp::ReadLatency, BenchOp::WriteLatency] {
            let v: Vec<f64> = samples.iter().filter(|s| s.op == op && s.page_size == p).map(|s| s.value).collect();
            ensure(v.len() == cfg.cache_sizes.len(), || format!("missing samples at page {p}"))?;
            let ratio = v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min);
            ensure(ratio <= 1.05, || format!("{op} page {p}: max/min {ratio:.4}"))?;
            worst = worst.max(ratio);
        }
    }
    let four_k = samples[0].value;
    Ok(format!("worst max/min {worst:.4} over 6 page sizes; 4K read {four_k:.3}us"))
}

fn cached_read_bandwidth() -> Verdict {
    let base = BenchConfig::default();
    let cfg = BenchConfig {
        cache_sizes: vec![base.gas_size],
        ..base
    };
    let local = bench::model_local_copy_bw(&cfg.latency);
    let samples = bench::run_bandwidth_sweep(&cfg).map_err(|e| e.to_string())?;
    let reads: Vec<_> = samples.iter().filter(|s| s.op == BenchOp::ReadBw).collect();
    ensure(reads.len() == cfg.page_sizes.len(), || "missing samples".into())?;
    let min = reads.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
    ensure(min >= 0.9 * local, || format!("min read bw {min:.3e} < 0.9 x {local:.3e}"))?;
    Ok(format!("min warm read {min:.3e} B/s = {:.3} x local copy", min / local))
}

fn determinism() -> Verdict {
    let gas = GasConfig::default();
    let mut cfg = SimConfig::new(gas.clone());
    cfg.skews = vec![ClockSkew::new(1_500, 1.1), ClockSkew::new(-700, 0.9)];
    let mut digests = BTreeSet::new();
    for seed in 0..20u64 {
        let w = gen_workload(seed, &Profile::write_contended(&gas));
        let a = run(&cfg, &w, seed).map_err(|e| e.to_string())?.trace.render();
        let b = run(&cfg, &w, seed).map_err(|e| e.to_string())?.trace.render();
        ensure(a == b, || format!("seed {seed}: traces differ"))?;
        digests.insert(a);
    }
    Ok(format!("20/20 byte-identical ({} distinct traces)", digests.len()))
}

fn wire_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut cuts = 0;
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = encode_frame(&m);
        let (back, used) = decode_frame(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        ensure(back == m && used == bytes.len(), || format!("message {i} differs after round trip"))?;
        for _ in 0..4 {
            let cut = rng.gen_range(0..bytes.len());
            let truncated = matches!(decode_frame(&bytes[..cut]), Err(FrameError::Truncated { .. }));
            let mut dec = FrameDecoder::new();
            dec.extend(&bytes[..cut]);
            let held = matches!(dec.next_frame(), Ok(None)) && dec.buffered() == cut;
            ensure(truncated && held, || format!("message {i} cut at {cut} not rejected intact"))?;
            cuts += 1;
        }
    }
    Ok(format!("10000 round trips, {cuts} truncations rejected"))
}

fn sync_primitives() -> Verdict {
    let gas = GasConfig::default();
    let profile = Profile::lock_protected(&gas);
    let cfg = SimConfig::new(gas.clone());
    let mut grants = 0;
    for seed in 0..100u64 {
        let w = gen_workload(seed, &profile);
        let out = run(&cfg, &w, seed).map_err(|e| e.to_string())?;
        let rep = check_trace(&out.trace);
        for kind in [ViolationKind::MutualExclusion, ViolationKind::BarrierSafety] {
            ensure(!rep.has(kind), || format!("seed {seed}: {rep}"))?;
        }
        // independent of the checker: lock holders never overlap
        let mut held: HashMap<u64, NodeId> = HashMap::new();
        let mut timeline: Vec<(u64, u8, usize)> = Vec::new();
        for (i, e) in out.trace.events.iter().enumerate() {
            match e.kind {
                KindTag::LockGrant => timeline.push((e.time, 1, i)),
                KindTag::LockRelease => timeline.push((e.sent, 0, i)),
                _ => {}
            }
        }
        timeline.sort();
        for (_, _, i) in timeline {
            let e = &out.trace.events[i];
            if e.kind == KindTag::LockGrant {
                grants += 1;
                if let Some(h) = held.insert(e.page, e.dst) {
                    return Err(format!("seed {seed}: lock {} granted to {} while {h} holds it", e.page, e.dst));
                }
            } else {
                held.remove(&e.page);
            }
        }
        for (i, outs) in out.outcomes.iter().enumerate() {
            let epochs: Vec<u64> = outs
                .iter()
                .filter_map(|o| match o {
                    CallOutcome::BarrierPassed { epoch } => Some(*epoch),
                    _ => None,
                })
                .collect();
            let want: Vec<u64> = (0..profile.rounds as u64).collect();
            ensure(epochs == want, || format!("seed {seed}: c{i} barrier {ROUND_BARRIER} epochs {epochs:?}"))?;
        }
    }
    for (file, kind) in [("lock_overlap.trace", "mutual-exclusion"), ("early_barrier.trace", "barrier-safety")] {
        let rep = check_trace(&fixture(file));
        ensure(rep.violations.iter().any(|v| v.kind.name() == kind), || format!("{file} not flagged: {rep}"))?;
    }
    Ok(format!("100/100 clean ({grants} lock grants), both fixtures flagged"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: std::thread::Result<Verdict>| {
        let (tag, detail) = match v {
            Ok(Ok(d)) => ("PASS", d),
            Ok(Err(d)) => ("FAIL", d),
            Err(p) => (
                "FAIL",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {n:>2} {name}: {detail}");
    };
    let guard = |f: &dyn Fn() -> Verdict| catch_unwind(AssertUnwindSafe(f));

    report(1, "scenario conformance", guard(&scenario_conformance));
    match catch_unwind(oracle_runs) {
        Ok(runs) => {
            report(2, "coherence oracle", Ok(coherence_oracle(&runs)));
            report(3, "single-writer and grant safety", Ok(single_writer_grant_safety(&runs)));
        }
        Err(_) => {
            report(2, "coherence oracle", Ok(Err("oracle runs panicked".into())));
            report(3, "single-writer and grant safety", Ok(Err("oracle runs panicked".into())));
        }
    }
    report(4, "slice lower bound under skew", guard(&slice_lower_bound));
    report(5, "no spontaneous relinquish", guard(&no_spontaneous_relinquish));
    report(6, "FIFO write queue", guard(&fifo_write_queue));
    report(7, "latency cache-invariance", guard(&latency_invariance));
    report(8, "cached-read bandwidth", guard(&cached_read_bandwidth));
    report(9, "determinism", guard(&determinism));
    report(10, "wire round-trip", guard(&wire_round_trip));
    report(11, "sync primitives", guard(&sync_primitives));

    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
