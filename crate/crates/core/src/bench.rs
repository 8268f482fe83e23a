//! First-byte latency and full-sweep bandwidth versus page size and cache
//! size, on either backend.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::api::SimDsm;
use crate::error::{Error, Result};
use crate::geometry::{format_size, GasConfig, NodeId, KIB, MIB};
use crate::protocol::{AppCall, CallOutcome};
use crate::sim::SimConfig;
use crate::transport::stream::{HostMap, LocalCluster, StreamCompute, StreamOptions};
use crate::transport::LatencyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BenchOp {
    ReadLatency,
    WriteLatency,
    ReadBw,
    WriteBw,
}

impl BenchOp {
    pub const ALL: [BenchOp; 4] = [Self::ReadLatency, Self::WriteLatency, Self::ReadBw, Self::WriteBw];

    pub fn name(self) -> &'static str {
        match self {
            Self::ReadLatency => "read_latency",
            Self::WriteLatency => "write_latency",
            Self::ReadBw => "read_bw",
            Self::WriteBw => "write_bw",
        }
    }

    pub fn is_latency(self) -> bool {
        matches!(self, Self::ReadLatency | Self::WriteLatency)
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Sim,
    Stream,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sim => "sim",
            Self::Stream => "stream",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(Self::Sim),
            "stream" => Ok(Self::Stream),
            _ => Err(Error::Config(format!("unknown backend `{s}` (sim|stream)"))),
        }
    }
}

/// Latency in microseconds, bandwidth in bytes per second.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSample {
    pub op: BenchOp,
    pub page_size: u64,
    pub cache_size: u64,
    pub backend: Backend,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub gas_size: u64,
    pub page_sizes: Vec<u64>,
    pub cache_sizes: Vec<u64>,
    pub servers: u16,
    pub computes: u16,
    pub slice: Duration,
    pub seed: u64,
    pub backend: Backend,
    /// Existing servers to measure against (stream backend only).
    pub hosts: Option<PathBuf>,
    pub latency: LatencyModel,
    /// Cold accesses per latency cell; the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let gas_size = 16 * MIB;
        Self {
            gas_size,
            page_sizes: default_page_sizes(),
            cache_sizes: default_cache_sizes(gas_size),
            servers: 2,
            computes: 1,
            slice: Duration::from_millis(10),
            seed: 0,
            backend: Backend::Sim,
            hosts: None,
            latency: LatencyModel::default(),
            repeats: 9,
        }
    }
}

/// Six page sizes spanning 4K to 1M.
pub fn default_page_sizes() -> Vec<u64> {
    vec![4 * KIB, 8 * KIB, 16 * KIB, 64 * KIB, 256 * KIB, MIB]
}

/// GAS/8, GAS/4, GAS/2 and GAS.
pub fn default_cache_sizes(gas_size: u64) -> Vec<u64> {
    vec![gas_size / 8, gas_size / 4, gas_size / 2, gas_size]
}

impl BenchConfig {
    pub fn gas(&self, page_size: u64, cache_size: u64) -> Result<GasConfig> {
        GasConfig {
            gas_size: self.gas_size,
            page_size,
            cache_size,
            num_servers: self.servers,
            num_computes: self.computes.max(1),
            slice_len: self.slice,
        }
        .validated()
    }

    fn validate(&self) -> Result<()> {
        if self.page_sizes.is_empty() || self.cache_sizes.is_empty() {
            return Err(Error::Config("empty benchmark grid".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if self.hosts.is_some() && self.page_sizes.len() != 1 {
            return Err(Error::Config(
                "running servers have one page size; pass exactly one --page-sizes value with --hosts".into(),
            ));
        }
        for &p in &self.page_sizes {
            for &c in &self.cache_sizes {
                self.gas(p, c)?;
            }
        }
        self.latency.validate()
    }
}

/// A single measuring client: c0 of a fresh cluster.
enum Target {
    Sim(Box<SimDsm>),
    Local(LocalCluster),
    Remote(StreamCompute),
}

impl Target {
    fn open(cfg: &BenchConfig, gas: GasConfig) -> Result<Self> {
        match cfg.backend {
            Backend::Sim => {
                let mut sc = SimConfig::new(gas);
                sc.latency = cfg.latency.clone();
                sc.jitter_ns = 0;
                Ok(Self::Sim(Box::new(SimDsm::map(sc, cfg.seed)?)))
            }
            Backend::Stream => match &cfg.hosts {
                None => Ok(Self::Local(LocalCluster::start(gas, &StreamOptions::default())?)),
                Some(path) => {
                    let hosts = HostMap::load(&HostMap::resolve_path(Some(path))?)?;
                    hosts.check_covers(&gas)?;
                    let c = StreamCompute::spawn(
                        NodeId::compute(0),
                        Arc::new(gas),
                        Arc::new(hosts),
                        None,
                        &StreamOptions::default(),
                    )?;
                    Ok(Self::Remote(c))
                }
            },
        }
    }

    /// Runs `call` on c0; returns the outcome and elapsed nanoseconds
    /// (virtual on the simulator, wall clock otherwise).
    fn timed(&mut self, call: AppCall) -> Result<(CallOutcome, f64)> {
        match self {
            Self::Sim(d) => {
                let (o, ns) = d.cluster_mut().call(0, call)?;
                Ok((o, ns as f64))
            }
            Self::Local(cl) => wall(|| cl.compute(0).call(call)),
            Self::Remote(c) => wall(|| c.call(call)),
        }
    }

    fn close(mut self) -> Result<()> {
        // leave running servers with no cached copies on record
        self.timed(AppCall::Flush)?;
        match self {
            Self::Sim(_) => Ok(()),
            Self::Local(cl) => cl.shutdown(),
            Self::Remote(c) => c.shutdown(),
        }
    }
}

fn wall(f: impl FnOnce() -> Result<CallOutcome>) -> Result<(CallOutcome, f64)> {
    let t = Instant::now();
    let o = f()?;
    Ok((o, t.elapsed().as_nanos() as f64))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn latency_cell(cfg: &BenchConfig, gas: &GasConfig, t: &mut Target) -> Result<(f64, f64)> {
    let mut reads = Vec::new();
    let mut writes = Vec::new();
    for k in 0..cfg.repeats as u64 {
        let addr = (k % gas.num_pages()) * gas.page_size;
        t.timed(AppCall::Flush)?;
        reads.push(t.timed(AppCall::Read { addr, len: 1 })?.1);
        t.timed(AppCall::Flush)?;
        writes.push(t.timed(AppCall::Write { addr, bytes: vec![1] })?.1);
    }
    t.timed(AppCall::Flush)?;
    Ok((median(reads) / 1000.0, median(writes) / 1000.0))
}

fn bandwidth_cell(gas: &GasConfig, t: &mut Target) -> Result<(f64, f64)> {
    let bytes = vec![0u8; gas.gas_size as usize];
    let (_, w_ns) = t.timed(AppCall::Write { addr: 0, bytes })?;
    let (_, r_ns) = t.timed(AppCall::Read {
        addr: 0,
        len: gas.gas_size,
    })?;
    let bw = |ns: f64| gas.gas_size as f64 / (ns.max(1.0) / 1e9);
    Ok((bw(r_ns), bw(w_ns)))
}

fn run_grid(cfg: &BenchConfig, ops: &[BenchOp]) -> Result<Vec<BenchSample>> {
    cfg.validate()?;
    let want_lat = ops.iter().any(|o| o.is_latency());
    let want_bw = ops.iter().any(|o| !o.is_latency());
    let mut out = Vec::new();
    for &page_size in &cfg.page_sizes {
        for &cache_size in &cfg.cache_sizes {
            let gas = cfg.gas(page_size, cache_size)?;
            let mut values = Vec::new();
            if want_lat {
                let mut t = Target::open(cfg, gas.clone())?;
                let (r, w) = latency_cell(cfg, &gas, &mut t)?;
                t.close()?;
                values.push((BenchOp::ReadLatency, r));
                values.push((BenchOp::WriteLatency, w));
            }
            if want_bw {
                // a fresh cluster so the sweep starts cold
                let mut t = Target::open(cfg, gas.clone())?;
                let (r, w) = bandwidth_cell(&gas, &mut t)?;
                t.close()?;
                values.push((BenchOp::ReadBw, r));
                values.push((BenchOp::WriteBw, w));
            }
            for (op, value) in values.into_iter().filter(|(op, _)| ops.contains(op)) {
                out.push(BenchSample {
                    op,
                    page_size,
                    cache_size,
                    backend: cfg.backend,
                    value,
                });
            }
        }
    }
    Ok(out)
}

/// Median of `repeats` cold first-byte reads and writes per grid cell.
pub fn run_latency_sweep(cfg: &BenchConfig) -> Result<Vec<BenchSample>> {
    run_grid(cfg, &[BenchOp::ReadLatency, BenchOp::WriteLatency])
}

/// Full-space write pass then full-space read pass per grid cell.
pub fn run_bandwidth_sweep(cfg: &BenchConfig) -> Result<Vec<BenchSample>> {
    run_grid(cfg, &[BenchOp::ReadBw, BenchOp::WriteBw])
}

/// All four operations, grouped by cell in grid order.
pub fn run_all(cfg: &BenchConfig) -> Result<Vec<BenchSample>> {
    run_grid(cfg, &BenchOp::ALL)
}

pub const CSV_HEADER: &str = "op,page_size,cache_size,backend,value";

pub fn render_csv(samples: &[BenchSample]) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to write".into()));
    }
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for x in samples {
        s.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            x.op, x.page_size, x.cache_size, x.backend, x.value
        ));
    }
    Ok(s)
}

pub fn emit_csv(samples: &[BenchSample], path: &Path) -> Result<()> {
    let text = render_csv(samples)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Host memcpy bandwidth in bytes per second, best of a few passes.
pub fn measure_local_copy_bw(bytes: usize) -> f64 {
    let src = vec![1u8; bytes];
    let mut dst = vec![0u8; bytes];
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t = Instant::now();
        dst.copy_from_slice(std::hint::black_box(&src));
        std::hint::black_box(&dst);
        best = best.min(t.elapsed().as_secs_f64());
    }
    bytes as f64 / best.max(1e-9)
}

/// Local copy bandwidth of the simulated nodes, in bytes per second.
pub fn model_local_copy_bw(model: &LatencyModel) -> f64 {
    model.local_copy_bw * 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrendReport {
    pub checks: Vec<TrendCheck>,
}

impl TrendReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&TrendCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for TrendReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn values(samples: &[BenchSample], op: BenchOp, page: Option<u64>, cache: Option<u64>) -> Vec<&BenchSample> {
    samples
        .iter()
        .filter(|s| s.op == op && page.is_none_or(|p| s.page_size == p) && cache.is_none_or(|c| s.cache_size == c))
        .collect()
}

fn distinct(it: impl Iterator<Item = u64>) -> Vec<u64> {
    let mut v: Vec<u64> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Checks (a) latency cache-invariance, (b) latency monotone in page size,
/// (c) warm read bandwidth at cache = GAS against `local_copy_bw` (bytes/s),
/// (d) every bandwidth positive and finite. Stream samples only get (d).
pub fn assert_trends(samples: &[BenchSample], gas_size: u64, local_copy_bw: f64) -> TrendReport {
    let sim: Vec<BenchSample> = samples.iter().filter(|s| s.backend == Backend::Sim).cloned().collect();
    let pages = distinct(sim.iter().map(|s| s.page_size));
    let caches = distinct(sim.iter().map(|s| s.cache_size));
    let mut report = TrendReport::default();

    if !sim.is_empty() {
        let mut worst = (1.0f64, String::new());
        for op in [BenchOp::ReadLatency, BenchOp::WriteLatency] {
            for &p in &pages {
                let v: Vec<f64> = values(&sim, op, Some(p), None).iter().map(|s| s.value).collect();
                if v.is_empty() {
                    continue;
                }
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(0.0, f64::max);
                let ratio = hi / lo;
                if ratio > worst.0 || worst.1.is_empty() {
                    worst = (ratio, format!("{op} at page {}", format_size(p)));
                }
            }
        }
        report.checks.push(TrendCheck {
            name: "latency-cache-invariance",
            passed: worst.0 <= 1.05,
            detail: format!("worst max/min {:.4} ({}), limit 1.05", worst.0, worst.1),
        });

        let mut bad = Vec::new();
        for op in [BenchOp::ReadLatency, BenchOp::WriteLatency] {
            for &c in &caches {
                let mut v = values(&sim, op, None, Some(c));
                v.sort_by_key(|s| s.page_size);
                for w in v.windows(2) {
                    if w[1].value < w[0].value {
                        bad.push(format!(
                            "{op} cache {}: {} -> {}",
                            format_size(c),
                            format_size(w[0].page_size),
                            format_size(w[1].page_size)
                        ));
                    }
                }
            }
        }
        report.checks.push(TrendCheck {
            name: "latency-monotone",
            passed: bad.is_empty(),
            detail: if bad.is_empty() {
                "non-decreasing in page size".into()
            } else {
                format!("decreases: {}", bad.join("; "))
            },
        });

        let full = values(&sim, BenchOp::ReadBw, None, Some(gas_size));
        let floor = 0.9 * local_copy_bw;
        let low: Vec<String> = full
            .iter()
            .filter(|s| s.value < floor)
            .map(|s| format!("page {}: {:.3e}", format_size(s.page_size), s.value))
            .collect();
        let min = full.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
        report.checks.push(TrendCheck {
            name: "cached-read-bandwidth",
            passed: !full.is_empty() && low.is_empty(),
            detail: if full.is_empty() {
                "no read_bw samples at cache = GAS".into()
            } else if low.is_empty() {
                format!("min {min:.3e} B/s >= 0.9 x {local_copy_bw:.3e} B/s")
            } else {
                format!("below {floor:.3e} B/s: {}", low.join("; "))
            },
        });
    }

    let bws: Vec<&BenchSample> = samples.iter().filter(|s| !s.op.is_latency()).collect();
    let broken: Vec<String> = bws
        .iter()
        .filter(|s| !(s.value.is_finite() && s.value > 0.0))
        .map(|s| format!("{} page {} cache {}", s.op, format_size(s.page_size), format_size(s.cache_size)))
        .collect();
    report.checks.push(TrendCheck {
        name: "bandwidth-finite",
        passed: !bws.is_empty() && broken.is_empty(),
        detail: if bws.is_empty() {
            "no bandwidth samples".into()
        } else if broken.is_empty() {
            format!("{} samples positive and finite", bws.len())
        } else {
            broken.join("; ")
        },
    });
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(op: BenchOp, page_size: u64, cache_size: u64, value: f64) -> BenchSample {
        BenchSample {
            op,
            page_size,
            cache_size,
            backend: Backend::Sim,
            value,
        }
    }

    #[test]
    fn four_k_read_latency_matches_model() {
        let cfg = BenchConfig {
            page_sizes: vec![4 * KIB],
            cache_sizes: vec![2 * MIB],
            ..BenchConfig::default()
        };
        let s = run_latency_sweep(&cfg).unwrap();
        // ReadReq + PageData(4096) + one cached 1-byte access
        let expect = 10.0 + 10.0 + 4096.0 / 250.0 + 0.051;
        assert!((s[0].value - expect).abs() < 1e-3, "{}", s[0].value);
        assert_eq!(s[0].op, BenchOp::ReadLatency);
        assert_eq!(s[1].op, BenchOp::WriteLatency);
    }

    #[test]
    fn csv_shape() {
        assert!(render_csv(&[]).is_err());
        let one = render_csv(&[sample(BenchOp::ReadBw, 4096, 8192, 1.5)]).unwrap();
        assert_eq!(one, "op,page_size,cache_size,backend,value\nread_bw,4096,8192,sim,1.500\n");
    }

    #[test]
    fn forged_cache_dependent_latency_fails_a() {
        let s = vec![
            sample(BenchOp::ReadLatency, 4096, 1, 10.0),
            sample(BenchOp::ReadLatency, 4096, 2, 20.0),
            sample(BenchOp::ReadBw, 4096, 2, 1e9),
        ];
        let r = assert_trends(&s, 2, 1e9);
        assert!(!r.check("latency-cache-invariance").unwrap().passed);
    }

    #[test]
    fn forged_non_monotone_latency_fails_b() {
        let s = vec![
            sample(BenchOp::ReadLatency, 4096, 1, 30.0),
            sample(BenchOp::ReadLatency, 8192, 1, 20.0),
            sample(BenchOp::ReadBw, 4096, 1, 1e9),
        ];
        let r = assert_trends(&s, 1, 1e9);
        assert!(!r.check("latency-monotone").unwrap().passed);
        assert!(r.check("latency-cache-invariance").unwrap().passed);
    }

    #[test]
    fn nan_bandwidth_fails_d() {
        let s = vec![sample(BenchOp::WriteBw, 4096, 1, f64::NAN)];
        assert!(!assert_trends(&s, 1, 1.0).check("bandwidth-finite").unwrap().passed);
    }

    #[test]
    fn hosts_need_single_page_size() {
        let cfg = BenchConfig {
            hosts: Some("h".into()),
            backend: Backend::Stream,
            ..BenchConfig::default()
        };
        assert!(matches!(run_all(&cfg), Err(Error::Config(_))));
    }
}
