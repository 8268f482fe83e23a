use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dsm_core::bench::{self, Backend, BenchConfig};
use dsm_core::geometry::{parse_duration, parse_size};
use dsm_core::sim::workload::Mix;
use dsm_core::sim::{check_trace, gen_workload, run, serial_oracle, Profile, SimConfig, Trace};
use dsm_core::transport::stream::{spawn_server, HostMap, StreamOptions};
use dsm_core::{GasConfig, NodeId};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Page-based distributed shared memory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Latency and bandwidth sweeps over page size and cache size.
    Bench(BenchArgs),
    /// Run one memory server over TCP until killed.
    Serve(ServeArgs),
    /// Run a generated workload on the simulated cluster.
    Sim(SimArgs),
    /// Check a recorded trace for protocol violations.
    Check {
        trace: PathBuf,
    },
}

/// Geometry overrides applied on top of `--config`.
#[derive(Args, Clone, Default)]
struct GasArgs {
    /// key=value file (gas_size, page_size, cache_size, servers, computes,
    /// slice); bench takes page and cache sizes from its grid flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = size)]
    gas_size: Option<u64>,
    #[arg(long)]
    servers: Option<u16>,
    #[arg(long)]
    computes: Option<u16>,
    #[arg(long, value_parser = duration)]
    slice: Option<Duration>,
}

impl GasArgs {
    fn resolve(&self, base: GasConfig) -> Result<GasConfig> {
        let mut g = match &self.config {
            Some(p) => GasConfig::load(p, base).with_context(|| format!("loading {}", p.display()))?,
            None => base,
        };
        if let Some(v) = self.gas_size {
            g.gas_size = v;
        }
        if let Some(v) = self.servers {
            g.num_servers = v;
        }
        if let Some(v) = self.computes {
            g.num_computes = v;
        }
        if let Some(v) = self.slice {
            g.slice_len = v;
        }
        Ok(g)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    gas: GasArgs,
    /// Comma-separated, e.g. 4K,64K,1M
    #[arg(long, value_delimiter = ',', value_parser = size)]
    page_sizes: Vec<u64>,
    /// Comma-separated; defaults to GAS/8, GAS/4, GAS/2, GAS
    #[arg(long, value_delimiter = ',', value_parser = size)]
    cache_sizes: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BackendArg::Sim)]
    backend: BackendArg,
    /// Measure against already running servers (stream backend)
    #[arg(long)]
    hosts: Option<PathBuf>,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verify the expected trends and exit nonzero if any fails
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Stream,
}

#[derive(Args)]
struct ServeArgs {
    /// Server id, e.g. s0
    #[arg(long)]
    node: NodeId,
    /// Hosts file; DSM_HOSTS overrides
    #[arg(long)]
    hosts: Option<PathBuf>,
    #[command(flatten)]
    gas: GasArgs,
    #[arg(long, value_parser = size)]
    page_size: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    gas: GasArgs,
    #[arg(long, value_parser = size)]
    page_size: Option<u64>,
    #[arg(long, value_parser = size)]
    cache_size: Option<u64>,
    #[arg(long, value_enum, default_value_t = MixArg::Lock)]
    mix: MixArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    rounds: u32,
    /// Write the trace here
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run the trace checker
    #[arg(long)]
    check: bool,
    /// Compare the final image against a serial replay
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    Lock,
    Write,
    Read,
}

fn size(s: &str) -> Result<u64, String> {
    parse_size(s).map_err(|e| e.to_string())
}

fn duration(s: &str) -> Result<Duration, String> {
    parse_duration(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Serve(a) => serve_cmd(a),
        Cmd::Sim(a) => sim_cmd(a),
        Cmd::Check { trace } => check_cmd(&trace),
    }
}

fn bench_cmd(a: BenchArgs) -> Result<ExitCode> {
    let defaults = BenchConfig::default();
    let base = GasConfig {
        gas_size: defaults.gas_size,
        num_servers: defaults.servers,
        num_computes: defaults.computes,
        slice_len: defaults.slice,
        ..GasConfig::default()
    };
    let g = a.gas.resolve(base)?;
    let cfg = BenchConfig {
        gas_size: g.gas_size,
        page_sizes: if a.page_sizes.is_empty() { bench::default_page_sizes() } else { a.page_sizes },
        cache_sizes: if a.cache_sizes.is_empty() {
            bench::default_cache_sizes(g.gas_size)
        } else {
            a.cache_sizes
        },
        servers: g.num_servers,
        computes: g.num_computes,
        slice: g.slice_len,
        seed: a.seed,
        backend: match a.backend {
            BackendArg::Sim => Backend::Sim,
            BackendArg::Stream => Backend::Stream,
        },
        hosts: a.hosts,
        ..defaults
    };
    let samples = bench::run_all(&cfg)?;
    match &a.out {
        Some(p) => {
            bench::emit_csv(&samples, p).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("{} samples -> {}", samples.len(), p.display());
        }
        None => print!("{}", bench::render_csv(&samples)?),
    }
    if !a.check {
        return Ok(ExitCode::SUCCESS);
    }
    let local = match cfg.backend {
        Backend::Sim => bench::model_local_copy_bw(&cfg.latency),
        Backend::Stream => bench::measure_local_copy_bw(cfg.gas_size as usize),
    };
    let report = bench::assert_trends(&samples, cfg.gas_size, local);
    eprint!("{report}");
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn serve_cmd(a: ServeArgs) -> Result<ExitCode> {
    if !a.node.is_server() {
        bail!("{} is not a server id (expected sN)", a.node);
    }
    let mut g = a.gas.resolve(GasConfig::default())?;
    if let Some(p) = a.page_size {
        g.page_size = p;
    }
    let g = g.validated()?;
    if !g.contains(a.node) {
        bail!("{} is outside a cluster of {} servers", a.node, g.num_servers);
    }
    let path = HostMap::resolve_path(a.hosts.as_deref())?;
    let hosts = HostMap::load(&path).with_context(|| format!("reading {}", path.display()))?;
    eprintln!("{} listening on {}", a.node, hosts.addr(a.node)?);
    let h = spawn_server(a.node, Arc::new(g), Arc::new(hosts), None, &StreamOptions::default())?;
    h.join()?;
    Ok(ExitCode::SUCCESS)
}

fn sim_cmd(a: SimArgs) -> Result<ExitCode> {
    let mut g = a.gas.resolve(GasConfig::default())?;
    if let Some(p) = a.page_size {
        g.page_size = p;
    }
    if let Some(c) = a.cache_size {
        g.cache_size = c;
    }
    let g = g.validated()?;
    let mix = match a.mix {
        MixArg::Lock => Mix::LockProtected,
        MixArg::Write => Mix::WriteContended,
        MixArg::Read => Mix::ReadHeavy,
    };
    let profile = Profile {
        rounds: a.rounds,
        ..Profile::new(mix, &g)
    };
    let workload = gen_workload(a.seed, &profile);
    let out = run(&SimConfig::new(g.clone()), &workload, a.seed)?;
    println!(
        "{} ops, {} trace events, end {} ns, digest {:016x}",
        workload.len(),
        out.trace.events.len(),
        out.end_time,
        out.trace.digest()
    );
    if let Some(p) = &a.trace {
        std::fs::write(p, out.trace.render()).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut ok = true;
    if a.check {
        let report = check_trace(&out.trace);
        print!("{report}");
        ok &= report.is_clean();
    }
    if a.oracle {
        let o = serial_oracle(&g, &workload, &out.trace)?;
        let same = o.image == out.image;
        println!("oracle image {}", if same { "matches" } else { "DIFFERS" });
        ok &= same;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn check_cmd(path: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = check_trace(&Trace::parse(&text)?);
    print!("{report}");
    print!("{}", report.machine_lines());
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
