//! TCP backend: one OS process (or thread group) per node, pairwise
//! connections, length-prefixed frames.
//!
//! Each node listens on its hosts-file address. A sender opens one outgoing
//! connection per peer and introduces itself with its wire id and a random
//! incarnation number, so a restarted peer is told apart from the old one.
//! The receiving side runs one reader thread per incoming connection. All
//! readers feed a single channel drained by the node's sequential event
//! loop, so per-pair FIFO carries over from TCP.

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::io::{BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::frame::{encode_into, FrameDecoder};
use crate::error::{Error, Result};
use crate::geometry::{GasConfig, NodeId, PageId};
use crate::message::Message;
use crate::protocol::{AppCall, CallOutcome, ComputeNode, Envelope, Output, ServerNode};
use crate::transport::LatencyModel;

/// Environment variable that overrides the hosts file path.
pub const HOSTS_ENV: &str = "DSM_HOSTS";

/// `node_id host:port` per line; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostMap {
    pub addrs: BTreeMap<NodeId, String>,
}

impl HostMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut addrs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("hosts line {}: {raw:?}", n + 1));
            let mut it = line.split_whitespace();
            let (Some(id), Some(addr), None) = (it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            let id: NodeId = id.parse().map_err(|_| bad())?;
            if addrs.insert(id, addr.to_string()).is_some() {
                return Err(Error::Config(format!("hosts: {id} listed twice")));
            }
        }
        Ok(Self { addrs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Path from `DSM_HOSTS` if set, else `default`.
    pub fn resolve_path(default: Option<&Path>) -> Result<PathBuf> {
        match std::env::var_os(HOSTS_ENV) {
            Some(p) => Ok(PathBuf::from(p)),
            None => default
                .map(Path::to_path_buf)
                .ok_or_else(|| Error::Config(format!("no hosts file given and {HOSTS_ENV} unset"))),
        }
    }

    pub fn render(&self) -> String {
        self.addrs.iter().map(|(n, a)| format!("{n} {a}\n")).collect()
    }

    pub fn addr(&self, node: NodeId) -> Result<&str> {
        self.addrs
            .get(&node)
            .map(String::as_str)
            .ok_or_else(|| Error::Transport(format!("{node} not in hosts file")))
    }

    /// Every node of `gas` must have an address.
    pub fn check_covers(&self, gas: &GasConfig) -> Result<()> {
        for n in gas.servers().chain(gas.computes()) {
            self.addr(n)?;
        }
        Ok(())
    }
}

/// Wire id then a random per-process incarnation number.
const HELLO_LEN: usize = 10;

enum Event {
    /// A peer opened a connection, announcing its incarnation.
    Hello(NodeId, u64),
    Msg(Message),
    Call(AppCall, Sender<Result<CallOutcome>>),
    Stop,
}

/// Listening side plus lazily opened outgoing connections.
struct Endpoint {
    id: NodeId,
    hosts: Arc<HostMap>,
    out: HashMap<NodeId, BufWriter<TcpStream>>,
    incarnation: u64,
    peers: HashMap<NodeId, u64>,
    connect_timeout: Duration,
    buf: Vec<u8>,
}

impl Endpoint {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        if !self.out.contains_key(&env.dst) {
            let s = self.connect(env.dst)?;
            self.out.insert(env.dst, BufWriter::new(s));
        }
        self.buf.clear();
        encode_into(&env.msg, &mut self.buf);
        let w = self.out.get_mut(&env.dst).unwrap();
        w.write_all(&self.buf)?;
        w.flush()?;
        Ok(())
    }

    /// A peer seen before under another incarnation has restarted and
    /// listens on a fresh socket; reconnect on the next send.
    fn hello(&mut self, peer: NodeId, incarnation: u64) {
        if self.peers.insert(peer, incarnation).is_some_and(|old| old != incarnation) {
            self.out.remove(&peer);
        }
    }

    fn connect(&self, dst: NodeId) -> Result<TcpStream> {
        let addr = self.hosts.addr(dst)?;
        let deadline = Instant::now() + self.connect_timeout;
        loop {
            let attempt = addr
                .to_socket_addrs()
                .map_err(|e| Error::Connect(format!("{dst} at {addr}: {e}")))?
                .next()
                .ok_or_else(|| Error::Connect(format!("{dst}: {addr} resolves to nothing")))
                .and_then(|sa| TcpStream::connect(sa).map_err(|e| Error::Connect(format!("{dst} at {addr}: {e}"))));
            match attempt {
                Ok(mut s) => {
                    s.set_nodelay(true)?;
                    let mut hello = [0u8; HELLO_LEN];
                    hello[..2].copy_from_slice(&self.id.to_wire().to_le_bytes());
                    hello[2..].copy_from_slice(&self.incarnation.to_le_bytes());
                    s.write_all(&hello)?;
                    return Ok(s);
                }
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

/// Accepts peers and spawns one reader per connection.
fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) -> Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((s, _)) => {
                    let tx = tx.clone();
                    thread::spawn(move || read_peer(s, tx));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                Err(_) => thread::sleep(Duration::from_millis(2)),
            }
        }
    }))
}

fn read_peer(mut s: TcpStream, tx: Sender<Event>) {
    if s.set_nonblocking(false).is_err() || s.set_nodelay(true).is_err() {
        return;
    }
    let mut hello = [0u8; HELLO_LEN];
    if s.read_exact(&mut hello).is_err() {
        return;
    }
    let peer = NodeId::from_wire(u16::from_le_bytes([hello[0], hello[1]]));
    let incarnation = u64::from_le_bytes(hello[2..].try_into().unwrap());
    if tx.send(Event::Hello(peer, incarnation)).is_err() {
        return;
    }
    let mut dec = FrameDecoder::new();
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        let n = match s.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        dec.extend(&chunk[..n]);
        loop {
            match dec.next_frame() {
                Ok(Some(msg)) => {
                    if tx.send(Event::Msg(msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    eprintln!("dropping connection from {peer}: {e}");
                    return;
                }
            }
        }
    }
}

/// A node's event loop running on its own thread.
pub struct NodeHandle {
    id: NodeId,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<Result<()>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Stops the event loop and the acceptor; returns the loop's result.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop_threads()
    }

    /// Blocks until the event loop exits on its own (e.g. on error).
    pub fn join(mut self) -> Result<()> {
        let mut res = Ok(());
        for t in self.threads.drain(..) {
            res = res.and(t.join().unwrap_or_else(|_| Err(Error::Transport("node thread panicked".into()))));
        }
        self.stop.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        res
    }

    fn stop_threads(&mut self) -> Result<()> {
        let _ = self.tx.send(Event::Stop);
        self.stop.store(true, Ordering::Relaxed);
        let mut res = Ok(());
        for t in self.threads.drain(..) {
            res = res.and(t.join().unwrap_or_else(|_| Err(Error::Transport("node thread panicked".into()))));
        }
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        res
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        let _ = self.stop_threads();
    }
}

#[derive(Debug, Clone)]
pub struct StreamOptions {
    pub connect_timeout: Duration,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(10),
        }
    }
}

fn bind(hosts: &HostMap, id: NodeId) -> Result<TcpListener> {
    let addr = hosts.addr(id)?;
    TcpListener::bind(addr).map_err(|e| Error::Connect(format!("bind {id} at {addr}: {e}")))
}

/// Runs memory server `id` until shut down.
pub fn spawn_server(
    id: NodeId,
    gas: Arc<GasConfig>,
    hosts: Arc<HostMap>,
    listener: Option<TcpListener>,
    opts: &StreamOptions,
) -> Result<NodeHandle> {
    let listener = match listener {
        Some(l) => l,
        None => bind(&hosts, id)?,
    };
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = spawn_acceptor(listener, tx.clone(), stop.clone())?;
    let mut ep = Endpoint {
        id,
        hosts,
        out: HashMap::new(),
        incarnation: rand::random(),
        peers: HashMap::new(),
        connect_timeout: opts.connect_timeout,
        buf: Vec::new(),
    };
    let worker = thread::spawn(move || -> Result<()> {
        let mut node = ServerNode::new(id, gas);
        for ev in rx {
            match ev {
                Event::Msg(m) => {
                    for env in node.handle(m)? {
                        ep.send(&env)?;
                    }
                }
                Event::Hello(peer, inc) => ep.hello(peer, inc),
                Event::Stop => break,
                Event::Call(_, reply) => {
                    let _ = reply.send(Err(Error::Transport(format!("{id} is a server"))));
                }
            }
        }
        Ok(())
    });
    Ok(NodeHandle {
        id,
        tx,
        stop,
        threads: vec![worker],
        acceptor: Some(acceptor),
    })
}

/// A compute node whose protocol engine runs on a background thread so it
/// keeps serving peers between application calls.
pub struct StreamCompute {
    handle: NodeHandle,
}

impl StreamCompute {
    pub fn spawn(
        id: NodeId,
        gas: Arc<GasConfig>,
        hosts: Arc<HostMap>,
        listener: Option<TcpListener>,
        opts: &StreamOptions,
    ) -> Result<Self> {
        if !id.is_compute() || !gas.contains(id) {
            return Err(Error::Config(format!("{id} is not a compute node of this cluster")));
        }
        let listener = match listener {
            Some(l) => l,
            None => bind(&hosts, id)?,
        };
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, tx.clone(), stop.clone())?;
        let mut ep = Endpoint {
            id,
            hosts,
            out: HashMap::new(),
            incarnation: rand::random(),
            peers: HashMap::new(),
            connect_timeout: opts.connect_timeout,
            buf: Vec::new(),
        };
        // fail fast when owners are unreachable
        for s in gas.servers() {
            let conn = ep.connect(s)?;
            ep.out.insert(s, BufWriter::new(conn));
        }
        let worker = thread::spawn(move || compute_loop(id, gas, ep, rx));
        Ok(Self {
            handle: NodeHandle {
                id,
                tx,
                stop,
                threads: vec![worker],
                acceptor: Some(acceptor),
            },
        })
    }

    pub fn id(&self) -> NodeId {
        self.handle.id
    }

    pub fn call(&self, call: AppCall) -> Result<CallOutcome> {
        let (tx, rx) = mpsc::channel();
        self.handle
            .tx
            .send(Event::Call(call, tx))
            .map_err(|_| Error::Transport("compute engine stopped".into()))?;
        rx.recv()
            .map_err(|_| Error::Transport("compute engine stopped".into()))?
    }

    pub fn shutdown(self) -> Result<()> {
        self.handle.shutdown()
    }
}

fn compute_loop(id: NodeId, gas: Arc<GasConfig>, mut ep: Endpoint, rx: Receiver<Event>) -> Result<()> {
    let epoch = Instant::now();
    let local = |at: Instant| at.duration_since(epoch).as_nanos() as i64;
    let mut node = ComputeNode::new(id, gas, LatencyModel::default());
    let mut timers: BinaryHeap<Reverse<(i64, u64)>> = BinaryHeap::new();
    let mut reply: Option<Sender<Result<CallOutcome>>> = None;
    loop {
        let wait = timers
            .peek()
            .map(|Reverse((t, _))| Duration::from_nanos((*t - local(Instant::now())).max(0) as u64));
        let ev = match wait {
            Some(d) => match rx.recv_timeout(d) {
                Ok(ev) => Some(ev),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return Ok(()),
            },
            None => match rx.recv() {
                Ok(ev) => Some(ev),
                Err(_) => return Ok(()),
            },
        };
        let now = local(Instant::now());
        let mut outputs = match ev {
            Some(Event::Hello(peer, inc)) => {
                ep.hello(peer, inc);
                continue;
            }
            Some(Event::Msg(m)) => node.handle(m, now),
            Some(Event::Call(c, r)) => {
                if reply.is_some() {
                    let _ = r.send(Err(Error::Transport("call already in progress".into())));
                    continue;
                }
                reply = Some(r);
                node.start_call(c, now)
            }
            Some(Event::Stop) => return Ok(()),
            None => {
                let mut out = Vec::new();
                while let Some(Reverse((t, page))) = timers.peek().copied() {
                    if t > now {
                        break;
                    }
                    timers.pop();
                    out.extend(node.on_timer(PageId(page), now)?);
                }
                Ok(out)
            }
        };
        // Busy periods are real time here, so resume right away.
        loop {
            let outs = match outputs {
                Ok(o) => o,
                Err(e) => {
                    match reply.take() {
                        Some(r) => {
                            let _ = r.send(Err(e));
                        }
                        None => return Err(e),
                    }
                    break;
                }
            };
            let mut resume = false;
            for o in outs {
                match o {
                    Output::Send(env) => ep.send(&env)?,
                    Output::Timer { page, deadline } => timers.push(Reverse((deadline, page.0))),
                    Output::Busy { .. } => resume = true,
                    Output::Done(outcome) => {
                        if let Some(r) = reply.take() {
                            let _ = r.send(Ok(outcome));
                        }
                    }
                }
            }
            if !resume {
                break;
            }
            outputs = node.resume(local(Instant::now()));
        }
    }
}

/// Binds every node of `gas` on an ephemeral loopback port.
pub fn loopback_listeners(gas: &GasConfig) -> Result<(HostMap, Vec<(NodeId, TcpListener)>)> {
    let mut hosts = HostMap::default();
    let mut ls = Vec::new();
    for n in gas.servers().chain(gas.computes()) {
        let l = TcpListener::bind("127.0.0.1:0")?;
        let a: SocketAddr = l.local_addr()?;
        hosts.addrs.insert(n, a.to_string());
        ls.push((n, l));
    }
    Ok((hosts, ls))
}

/// A whole cluster on loopback inside this process: every server plus the
/// listed compute nodes.
pub struct LocalCluster {
    pub hosts: Arc<HostMap>,
    gas: GasConfig,
    servers: Vec<NodeHandle>,
    computes: Vec<Option<StreamCompute>>,
}

impl LocalCluster {
    pub fn start(gas: GasConfig, opts: &StreamOptions) -> Result<Self> {
        let gas = Arc::new(gas.validated()?);
        let (hosts, listeners) = loopback_listeners(&gas)?;
        let hosts = Arc::new(hosts);
        let mut servers = Vec::new();
        let mut computes = Vec::new();
        let mut pending = Vec::new();
        for (n, l) in listeners {
            if n.is_server() {
                servers.push(spawn_server(n, gas.clone(), hosts.clone(), Some(l), opts)?);
            } else {
                pending.push((n, l));
            }
        }
        for (n, l) in pending {
            computes.push(Some(StreamCompute::spawn(n, gas.clone(), hosts.clone(), Some(l), opts)?));
        }
        Ok(Self {
            gas: (*gas).clone(),
            hosts,
            servers,
            computes,
        })
    }

    /// Panics if the node was handed out with `take_session`.
    pub fn compute(&self, i: u16) -> &StreamCompute {
        self.computes[i as usize].as_ref().expect("compute node taken")
    }

    /// Moves compute `i` into an application session.
    pub fn take_session(&mut self, i: u16) -> Result<crate::api::StreamSession> {
        let c = self
            .computes
            .get_mut(i as usize)
            .and_then(Option::take)
            .ok_or_else(|| Error::Config(format!("c{i} absent or already taken")))?;
        Ok(crate::api::StreamSession::new(self.gas.clone(), c))
    }

    pub fn shutdown(self) -> Result<()> {
        let mut res = Ok(());
        for c in self.computes.into_iter().flatten() {
            res = res.and(c.shutdown());
        }
        for s in self.servers {
            res = res.and(s.shutdown());
        }
        res
    }
}
