//! Thread-and-TCP driver for the protocol nodes, plus the blocking client
//! API built on it.
//!
//! Each node lives behind one mutex. Every connection has a reader thread
//! that decodes frames and feeds them to the node, and every outgoing link
//! has a writer thread fed by an unbounded channel, so a node never blocks
//! on the network while holding its lock. A timer thread drives `tick`.
//!
//! The first frame on any connection is a `REGISTER` with role `Hello`
//! naming the dialing side: its listen address for servers and the
//! manager, an empty address plus the rank for clients. Clients have no
//! listener, so replies to them travel back over the connection they
//! opened.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Condvar, Mutex};

use crate::client::{ClientConfig, ClientCore, ClientError, READ_LATEST};
use crate::events::EventRecord;
use crate::node::{Endpoint, Node, Outbox};
use crate::manager::{Manager, ManagerConfig};
use crate::placement::Strategy;
use crate::server::{ServerConfig, ServerNode};
use crate::wire::{read_frame_in, Message, Packet, Register, Role, DEFAULT_MAX_PAYLOAD};

/// Receives every event a node emits.
pub type EventSink = Arc<dyn Fn(&EventRecord) + Send + Sync>;

/// Print events as JSON lines on stdout.
pub fn stdout_sink() -> EventSink {
    Arc::new(|r: &EventRecord| {
        let line = r.to_json();
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
    })
}

pub fn null_sink() -> EventSink {
    Arc::new(|_: &EventRecord| {})
}

struct Link {
    id: u64,
    tx: Sender<Packet>,
}

struct Shared<N> {
    node: Mutex<N>,
    changed: Condvar,
    timer: Condvar,
    epoch: Instant,
    me: Endpoint,
    hello: Register,
    links: Mutex<HashMap<Endpoint, Link>>,
    streams: Mutex<Vec<TcpStream>>,
    next_link: AtomicU64,
    stop: AtomicBool,
    sink: EventSink,
    max_payload: usize,
}

impl<N: Node + Send + 'static> Shared<N> {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn dispatch(self: &Arc<Self>, out: Outbox) {
        let now = self.now();
        for ev in out.events {
            (self.sink)(&EventRecord {
                at_ms: now.as_millis() as u64,
                node: self.me.to_string(),
                event: ev,
            });
        }
        for (to, pkt) in out.sends {
            self.send(to, pkt);
        }
    }

    fn send(self: &Arc<Self>, to: Endpoint, pkt: Packet) {
        if self.stop.load(Ordering::SeqCst) {
            return;
        }
        let mut links = self.links.lock();
        if let Some(l) = links.get(&to) {
            if l.tx.send(pkt.clone()).is_ok() {
                return;
            }
            links.remove(&to);
        }
        let Endpoint::Node(addr) = &to else {
            log::debug!("{}: no connection to {to}, dropping {}", self.me, pkt.msg.msg_type());
            return;
        };
        let (tx, rx) = unbounded::<Packet>();
        tx.send(pkt).unwrap();
        let id = self.next_link.fetch_add(1, Ordering::Relaxed);
        links.insert(to.clone(), Link { id, tx });
        drop(links);
        let shared = Arc::clone(self);
        let addr = addr.clone();
        thread::spawn(move || {
            let stream = match dial(&addr) {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("{}: dial {addr} failed: {e}", shared.me);
                    shared.drop_link(&to, id);
                    return;
                }
            };
            shared.track(&stream);
            if let Ok(r) = stream.try_clone() {
                let reader_shared = Arc::clone(&shared);
                let peer = to.clone();
                thread::spawn(move || reader_shared.read_loop(r, Some(peer)));
            }
            let mut w = BufWriter::with_capacity(256 << 10, stream);
            let hello = Packet::new(0, Message::Register(shared.hello.clone()));
            if write_packet(&mut w, &hello).is_err() {
                shared.drop_link(&to, id);
                return;
            }
            shared.write_loop(w, rx, &to, id);
        });
    }

    fn drop_link(&self, to: &Endpoint, id: u64) {
        let mut links = self.links.lock();
        if links.get(to).is_some_and(|l| l.id == id) {
            links.remove(to);
        }
    }

    fn track(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            self.streams.lock().push(c);
        }
        if self.stop.load(Ordering::SeqCst) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn write_loop(&self, mut w: BufWriter<TcpStream>, rx: crossbeam_channel::Receiver<Packet>, to: &Endpoint, id: u64) {
        while let Ok(pkt) = rx.recv() {
            let mut ok = write_packet(&mut w, &pkt).is_ok();
            // Batch whatever is already queued before flushing.
            while ok {
                match rx.try_recv() {
                    Ok(p) => ok = write_packet(&mut w, &p).is_ok(),
                    Err(_) => break,
                }
            }
            if !ok || w.flush().is_err() {
                log::debug!("{}: link to {to} broke", self.me);
                break;
            }
        }
        self.drop_link(to, id);
        let _ = w.get_ref().shutdown(Shutdown::Both);
    }

    /// Deliver frames from one connection. `peer` is known for connections
    /// we dialed; for accepted ones it comes from the hello.
    fn read_loop(self: Arc<Self>, stream: TcpStream, mut peer: Option<Endpoint>) {
        let accepted = peer.is_none();
        let writer = if accepted { stream.try_clone().ok() } else { None };
        let mut r = BufReader::with_capacity(256 << 10, stream);
        let mut arena = crate::arena::Arena::default();
        loop {
            if self.stop.load(Ordering::SeqCst) {
                return;
            }
            let frame = match read_frame_in(&mut r, self.max_payload, &mut arena) {
                Ok(f) => f,
                Err(e) => {
                    if !e.is_retryable() {
                        log::debug!("{}: read from {peer:?}: {e}", self.me);
                    }
                    return;
                }
            };
            let pkt = match Packet::from_frame(frame) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("{}: bad frame from {peer:?}: {e}", self.me);
                    return;
                }
            };
            if let Message::Register(Register { role: Role::Hello, rank, addr }) = &pkt.msg {
                let ep = if addr.is_empty() {
                    Endpoint::Client(*rank)
                } else {
                    Endpoint::Node(addr.clone())
                };
                if let (Endpoint::Client(_), Some(w)) = (&ep, writer.as_ref()) {
                    self.attach_client(ep.clone(), w);
                }
                peer = Some(ep);
                continue;
            }
            let Some(from) = peer.clone() else {
                log::warn!("{}: frame before hello", self.me);
                return;
            };
            self.deliver(&from, pkt);
        }
    }

    fn attach_client(self: &Arc<Self>, ep: Endpoint, stream: &TcpStream) {
        let Ok(s) = stream.try_clone() else { return };
        let (tx, rx) = unbounded::<Packet>();
        let id = self.next_link.fetch_add(1, Ordering::Relaxed);
        self.links.lock().insert(ep.clone(), Link { id, tx });
        let shared = Arc::clone(self);
        thread::spawn(move || {
            let w = BufWriter::with_capacity(256 << 10, s);
            shared.write_loop(w, rx, &ep, id);
        });
    }

    fn deliver(self: &Arc<Self>, from: &Endpoint, pkt: Packet) {
        let mut out = Outbox::new();
        {
            let mut node = self.node.lock();
            node.handle(self.now(), from, pkt, &mut out);
            self.dispatch(out);
        }
        self.changed.notify_all();
        self.timer.notify_one();
    }

    fn timer_loop(self: Arc<Self>) {
        let mut node = self.node.lock();
        while !self.stop.load(Ordering::SeqCst) {
            let now = self.now();
            match node.next_wakeup() {
                Some(t) if t <= now => {
                    let mut out = Outbox::new();
                    node.tick(now, &mut out);
                    self.dispatch(out);
                    self.changed.notify_all();
                }
                Some(t) => {
                    let wait = (t - now).min(Duration::from_millis(200));
                    self.timer.wait_for(&mut node, wait);
                }
                None => {
                    self.timer.wait_for(&mut node, Duration::from_millis(200));
                }
            }
        }
    }
}

fn dial(addr: &str) -> std::io::Result<TcpStream> {
    let sa = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
    let s = TcpStream::connect_timeout(&sa, Duration::from_secs(2))?;
    s.set_nodelay(true)?;
    Ok(s)
}

fn write_packet(w: &mut impl Write, pkt: &Packet) -> std::io::Result<()> {
    pkt.write_to(w).map_err(|e| match e {
        crate::wire::WireError::Io(io) => io,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
    })
}

/// A node running on threads. Dropping it shuts it down.
pub struct Runtime<N: Node + Send + 'static> {
    shared: Arc<Shared<N>>,
    listen: Option<String>,
    threads: Vec<JoinHandle<()>>,
}

impl<N: Node + Send + 'static> Runtime<N> {
    /// Start `node`. Servers and the manager pass the listener they will be
    /// reached on; clients pass `None`.
    pub fn start(node: N, listener: Option<TcpListener>, sink: EventSink) -> std::io::Result<Self> {
        let me = node.endpoint();
        let hello = match &me {
            Endpoint::Node(a) => Register {
                role: Role::Hello,
                rank: 0,
                addr: a.clone(),
            },
            Endpoint::Client(r) => Register {
                role: Role::Hello,
                rank: *r,
                addr: String::new(),
            },
        };
        let shared = Arc::new(Shared {
            node: Mutex::new(node),
            changed: Condvar::new(),
            timer: Condvar::new(),
            epoch: Instant::now(),
            me,
            hello,
            links: Mutex::new(HashMap::new()),
            streams: Mutex::new(Vec::new()),
            next_link: AtomicU64::new(1),
            stop: AtomicBool::new(false),
            sink,
            max_payload: DEFAULT_MAX_PAYLOAD,
        });
        let mut threads = Vec::new();
        let mut listen = None;
        if let Some(l) = listener {
            listen = Some(l.local_addr()?.to_string());
            let s = Arc::clone(&shared);
            threads.push(thread::spawn(move || {
                for conn in l.incoming() {
                    if s.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let _ = conn.set_nodelay(true);
                    s.track(&conn);
                    let s2 = Arc::clone(&s);
                    thread::spawn(move || s2.read_loop(conn, None));
                }
            }));
        }
        {
            let mut out = Outbox::new();
            let mut node = shared.node.lock();
            node.start(shared.now(), &mut out);
            shared.dispatch(out);
        }
        let s = Arc::clone(&shared);
        threads.push(thread::spawn(move || s.timer_loop()));
        Ok(Runtime { shared, listen, threads })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.shared.me
    }

    pub fn now(&self) -> Duration {
        self.shared.now()
    }

    /// Call into the node under its lock and send what it produced.
    pub fn with<R>(&self, f: impl FnOnce(&mut N, Duration, &mut Outbox) -> R) -> R {
        let mut out = Outbox::new();
        let r = {
            let mut node = self.shared.node.lock();
            let r = f(&mut node, self.shared.now(), &mut out);
            self.shared.dispatch(out);
            r
        };
        self.shared.changed.notify_all();
        self.shared.timer.notify_one();
        r
    }

    /// Read-only peek at the node.
    pub fn inspect<R>(&self, f: impl FnOnce(&N) -> R) -> R {
        f(&self.shared.node.lock())
    }

    /// Block until `pred` returns `Some`, re-checking whenever the node
    /// changes. `None` on timeout.
    pub fn wait_for<R>(&self, timeout: Duration, mut pred: impl FnMut(&mut N) -> Option<R>) -> Option<R> {
        let deadline = Instant::now() + timeout;
        let mut node = self.shared.node.lock();
        loop {
            if let Some(r) = pred(&mut node) {
                return Some(r);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            let step = (deadline - now).min(Duration::from_millis(100));
            self.shared.changed.wait_for(&mut node, step);
        }
    }

    /// Stop all threads and close every connection, as a crash would.
    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        self.shared.links.lock().clear();
        for s in self.shared.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(a) = &self.listen {
            // Unblock the accept loop.
            let _ = TcpStream::connect(a);
        }
        self.shared.timer.notify_all();
        self.shared.changed.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl<N: Node + Send + 'static> Drop for Runtime<N> {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Blocking client session.
pub struct BbClient {
    rt: Runtime<ClientCore>,
    open_timeout: Duration,
    op_timeout: Duration,
}

impl BbClient {
    pub fn open(manager_addr: &str, rank: u32, placement: Strategy) -> Result<Self, ClientError> {
        let mut cfg = ClientConfig::new(rank, manager_addr);
        cfg.placement = placement;
        Self::open_with(cfg, null_sink())
    }

    pub fn open_with(cfg: ClientConfig, sink: EventSink) -> Result<Self, ClientError> {
        let rt = Runtime::start(ClientCore::new(cfg), None, sink).map_err(|e| ClientError::Fatal(e.to_string()))?;
        let c = BbClient {
            rt,
            open_timeout: Duration::from_secs(30),
            op_timeout: Duration::from_secs(600),
        };
        c.rt
            .wait_for(c.open_timeout, |n| n.is_ready().then_some(()))
            .ok_or_else(|| ClientError::Timeout("server list".into()))?;
        Ok(c)
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.op_timeout = t;
    }

    pub fn rank(&self) -> u32 {
        self.rt.inspect(|c| c.rank())
    }

    pub fn set_epoch(&self, epoch: u32) {
        self.rt.with(|c, _, _| c.set_epoch(epoch));
    }

    pub fn epoch(&self) -> u32 {
        self.rt.inspect(|c| c.epoch())
    }

    pub fn stats(&self) -> crate::client::ClientStats {
        self.rt.inspect(|c| c.stats().clone())
    }

    pub fn server_list(&self) -> Option<crate::wire::ServerList> {
        self.rt.inspect(|c| c.server_list().cloned())
    }

    /// Queue one record; blocks while the acknowledgement window is full.
    pub fn write(&self, file_id: &str, offset: u64, payload: Bytes) -> Result<u64, ClientError> {
        let mut payload = Some(payload);
        let rt = &self.rt;
        loop {
            let r = rt.wait_for(self.op_timeout, |c| {
                if let Some(f) = c.fatal() {
                    return Some(Err(ClientError::Fatal(f.to_string())));
                }
                c.can_write().then_some(Ok(()))
            });
            match r {
                None => return Err(ClientError::Timeout("window slot".into())),
                Some(Err(e)) => return Err(e),
                Some(Ok(())) => {}
            }
            let res = rt.with(|c, now, out| {
                if !c.can_write() {
                    return None;
                }
                Some(c.write(now, file_id, offset, payload.take().unwrap(), out))
            });
            if let Some(r) = res {
                return r;
            }
        }
    }

    /// Block until every written record is acknowledged.
    pub fn wait(&self) -> Result<(), ClientError> {
        self.rt
            .wait_for(self.op_timeout, |c| {
                if let Some(f) = c.fatal() {
                    return Some(Err(ClientError::Fatal(f.to_string())));
                }
                (c.outstanding() == 0).then_some(Ok(()))
            })
            .unwrap_or_else(|| Err(ClientError::Timeout("acknowledgements".into())))
    }

    pub fn read(&self, file_id: &str, offset: u64, length: u64) -> Result<Bytes, ClientError> {
        self.read_epoch(file_id, offset, length, READ_LATEST)
    }

    pub fn read_epoch(&self, file_id: &str, offset: u64, length: u64, epoch: u32) -> Result<Bytes, ClientError> {
        let op = self.rt.with(|c, now, out| c.start_read(now, file_id, offset, length, epoch, out))?;
        self.rt
            .wait_for(self.op_timeout, |c| c.take_read(op))
            .unwrap_or_else(|| Err(ClientError::Timeout("read".into())))
    }

    /// Ask the manager to flush `epoch` and wait for the outcome.
    pub fn flush(&self, epoch: u32) -> Result<(), ClientError> {
        let op = self.rt.with(|c, _, out| c.start_flush(epoch, out))?;
        self.rt
            .wait_for(self.op_timeout, |c| c.take_flush(op))
            .unwrap_or_else(|| Err(ClientError::Timeout("flush".into())))
    }

    pub fn close(mut self) {
        self.rt.with(|c, _, _| c.close());
        self.rt.shutdown();
    }
}

/// Bind a listener, resolving port 0 to the real address.
pub fn bind(addr: &str) -> std::io::Result<(TcpListener, String)> {
    let l = TcpListener::bind(addr)?;
    let a = l.local_addr()?.to_string();
    Ok((l, a))
}

/// A manager and `n` servers on loopback, all in this process.
pub struct LocalCluster {
    pub manager_addr: String,
    pub addrs: Vec<String>,
    manager: Runtime<Manager>,
    servers: Vec<Option<Runtime<ServerNode>>>,
}

impl LocalCluster {
    /// `template` supplies everything but the addresses.
    pub fn start(n: usize, template: &ServerConfig, sink: EventSink) -> std::io::Result<Self> {
        let (ml, maddr) = bind("127.0.0.1:0")?;
        let mut mcfg = ManagerConfig::new(&maddr);
        mcfg.expected_servers = Some(n);
        let manager = Runtime::start(Manager::new(mcfg), Some(ml), sink.clone())?;
        let mut servers = Vec::new();
        let mut addrs = Vec::new();
        for _ in 0..n {
            let (l, a) = bind("127.0.0.1:0")?;
            let mut cfg = template.clone();
            cfg.listen_addr = a.clone();
            cfg.manager_addr = maddr.clone();
            servers.push(Some(Runtime::start(ServerNode::new(cfg), Some(l), sink.clone())?));
            addrs.push(a);
        }
        let c = LocalCluster {
            manager_addr: maddr,
            addrs,
            manager,
            servers,
        };
        for s in c.servers.iter().flatten() {
            s.wait_for(Duration::from_secs(30), |n| n.view().map(|_| ()))
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::TimedOut, "ring did not form"))?;
        }
        Ok(c)
    }

    pub fn manager(&self) -> &Runtime<Manager> {
        &self.manager
    }

    pub fn server(&self, i: usize) -> Option<&Runtime<ServerNode>> {
        self.servers.get(i).and_then(|s| s.as_ref())
    }

    /// Index of the server that was assigned `id`.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.servers
            .iter()
            .position(|s| s.as_ref().is_some_and(|s| s.inspect(|n| n.id()) == Some(id)))
    }

    pub fn kill(&mut self, i: usize) {
        if let Some(mut s) = self.servers.get_mut(i).and_then(|s| s.take()) {
            s.shutdown();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loopback_write_read_flush() {
        let dir = tempfile::tempdir().unwrap();
        let (ml, maddr) = bind("127.0.0.1:0").unwrap();
        let mut mcfg = ManagerConfig::new(&maddr);
        mcfg.expected_servers = Some(2);
        let _m = Runtime::start(Manager::new(mcfg), Some(ml), null_sink()).unwrap();
        let mut servers = Vec::new();
        for _ in 0..2 {
            let (l, a) = bind("127.0.0.1:0").unwrap();
            let mut cfg = ServerConfig::new(&a, &maddr);
            cfg.spill_dir = dir.path().to_path_buf();
            cfg.pfs_dir = dir.path().join("pfs");
            servers.push(Runtime::start(ServerNode::new(cfg), Some(l), null_sink()).unwrap());
        }
        let c = BbClient::open(&maddr, 0, Strategy::Ketama).unwrap();
        for i in 0..8u64 {
            c.write("x/f", i * 1000, Bytes::from(vec![i as u8; 1000])).unwrap();
        }
        c.wait().unwrap();
        let got = c.read("x/f", 1500, 1000).unwrap();
        assert_eq!(&got[..500], &[1u8; 500][..]);
        assert_eq!(&got[500..], &[2u8; 500][..]);
        c.flush(1).unwrap();
        let f = std::fs::read(dir.path().join("pfs/x/f")).unwrap();
        assert_eq!(f.len(), 8000);
        assert_eq!(f[7999], 7);
        c.close();
    }
}
