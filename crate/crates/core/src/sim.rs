//! Deterministic cluster simulator.
//!
//! Runs managers, servers and clients on a virtual clock with a seeded
//! network model: per-link FIFO delivery, latency plus jitter, and an
//! optional per-byte cost. Servers can be killed or added at any point.
//! Everything a test needs to judge the run (event log, redirect ground
//! truth, node state) is kept on the [`Sim`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::path::PathBuf;
use std::time::Duration;

use bytes::Bytes;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::client::{ClientConfig, ClientCore, ClientError};
use crate::events::{Event, EventRecord};
use crate::manager::{Manager, ManagerConfig};
use crate::node::{Endpoint, Node, Outbox};
use crate::server::{ServerConfig, ServerNode};
use crate::wire::{Message, Packet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation stalled at {0:?} with nothing left to run")]
    Stalled(Duration),
    #[error("deadline {0:?} passed")]
    Deadline(Duration),
    #[error("client {rank}: {err}")]
    Client { rank: u32, err: ClientError },
    #[error("no such node {0}")]
    NoSuchNode(Endpoint),
}

#[derive(Debug, Clone)]
pub struct NetModel {
    pub latency: Duration,
    /// Uniform extra delay in `[0, jitter)`.
    pub jitter: Duration,
    /// Link bandwidth; `None` makes transfers free.
    pub bytes_per_sec: Option<u64>,
    /// Push every packet through the wire codec.
    pub check_codec: bool,
}

impl Default for NetModel {
    fn default() -> Self {
        NetModel {
            latency: Duration::from_micros(100),
            jitter: Duration::from_micros(400),
            bytes_per_sec: Some(2_000_000_000),
            check_codec: false,
        }
    }
}

pub enum SimNode {
    Manager(Box<Manager>),
    Server(Box<ServerNode>),
    Client(Box<ClientCore>),
}

impl SimNode {
    fn node(&mut self) -> &mut dyn Node {
        match self {
            SimNode::Manager(m) => m.as_mut(),
            SimNode::Server(s) => s.as_mut(),
            SimNode::Client(c) => c.as_mut(),
        }
    }

    fn node_ref(&self) -> &dyn Node {
        match self {
            SimNode::Manager(m) => m.as_ref(),
            SimNode::Server(s) => s.as_ref(),
            SimNode::Client(c) => c.as_ref(),
        }
    }
}

/// Free memory of every live server at the moment a redirect was issued.
#[derive(Debug, Clone)]
pub struct RedirectAudit {
    pub at: Duration,
    pub origin: u32,
    pub target: u32,
    pub reported_free: u64,
    pub truth: Vec<(u32, u64)>,
}

impl RedirectAudit {
    /// Brute-force choice: most free memory among live servers other than
    /// the origin, lowest id on ties.
    pub fn expected(&self) -> Option<u32> {
        self.truth
            .iter()
            .filter(|(id, _)| *id != self.origin)
            .min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)))
            .map(|(id, _)| *id)
    }
}

enum Item {
    Deliver { from: Endpoint, to: Endpoint, pkt: Packet },
    Wake(Endpoint),
}

/// One client's stream of records to write.
pub type RecordSource = Box<dyn FnMut() -> Option<(String, u64, Bytes)>>;

pub struct Sim {
    now: Duration,
    rng: SmallRng,
    net: NetModel,
    nodes: BTreeMap<Endpoint, SimNode>,
    dead: BTreeSet<Endpoint>,
    heap: BinaryHeap<Reverse<(Duration, u64)>>,
    items: HashMap<u64, Item>,
    counter: u64,
    wakes: HashMap<Endpoint, Duration>,
    links: HashMap<(Endpoint, Endpoint), Duration>,
    pub log: Vec<EventRecord>,
    pub keep_log: bool,
    pub redirects: Vec<RedirectAudit>,
    pub delivered: u64,
    pub dropped: u64,
}

impl Sim {
    pub fn new(seed: u64, net: NetModel) -> Self {
        Sim {
            now: Duration::ZERO,
            rng: SmallRng::seed_from_u64(seed),
            net,
            nodes: BTreeMap::new(),
            dead: BTreeSet::new(),
            heap: BinaryHeap::new(),
            items: HashMap::new(),
            counter: 0,
            wakes: HashMap::new(),
            links: HashMap::new(),
            log: Vec::new(),
            keep_log: true,
            redirects: Vec::new(),
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn rng(&mut self) -> &mut SmallRng {
        &mut self.rng
    }

    pub fn add(&mut self, node: SimNode) -> Endpoint {
        let ep = node.node_ref().endpoint();
        self.dead.remove(&ep);
        self.nodes.insert(ep.clone(), node);
        let now = self.now;
        let _ = self.call(&ep, |n, out| n.node().start(now, out));
        ep
    }

    pub fn add_manager(&mut self, cfg: ManagerConfig) -> Endpoint {
        self.add(SimNode::Manager(Box::new(Manager::new(cfg))))
    }

    pub fn add_server(&mut self, cfg: ServerConfig) -> Endpoint {
        self.add(SimNode::Server(Box::new(ServerNode::new(cfg))))
    }

    pub fn add_client(&mut self, cfg: ClientConfig) -> Endpoint {
        self.add(SimNode::Client(Box::new(ClientCore::new(cfg))))
    }

    /// Crash a node: it stops ticking and everything addressed to it is
    /// dropped from now on.
    pub fn kill(&mut self, ep: &Endpoint) {
        self.dead.insert(ep.clone());
        self.wakes.remove(ep);
    }

    pub fn is_alive(&self, ep: &Endpoint) -> bool {
        self.nodes.contains_key(ep) && !self.dead.contains(ep)
    }

    pub fn node(&self, ep: &Endpoint) -> Option<&SimNode> {
        self.nodes.get(ep)
    }

    pub fn manager(&self, addr: &str) -> Option<&Manager> {
        match self.nodes.get(&Endpoint::node(addr)) {
            Some(SimNode::Manager(m)) => Some(m),
            _ => None,
        }
    }

    pub fn server(&self, addr: &str) -> Option<&ServerNode> {
        match self.nodes.get(&Endpoint::node(addr)) {
            Some(SimNode::Server(s)) => Some(s),
            _ => None,
        }
    }

    pub fn client(&self, rank: u32) -> Option<&ClientCore> {
        match self.nodes.get(&Endpoint::Client(rank)) {
            Some(SimNode::Client(c)) => Some(c),
            _ => None,
        }
    }

    /// Live servers in endpoint order.
    pub fn live_servers(&self) -> Vec<&ServerNode> {
        self.nodes
            .iter()
            .filter(|(ep, _)| !self.dead.contains(*ep))
            .filter_map(|(_, n)| match n {
                SimNode::Server(s) => Some(s.as_ref()),
                _ => None,
            })
            .collect()
    }

    /// Run `f` against a node and dispatch whatever it produced.
    pub fn call<R>(&mut self, ep: &Endpoint, f: impl FnOnce(&mut SimNode, &mut Outbox) -> R) -> Result<R, SimError> {
        if self.dead.contains(ep) {
            return Err(SimError::NoSuchNode(ep.clone()));
        }
        let node = self.nodes.get_mut(ep).ok_or_else(|| SimError::NoSuchNode(ep.clone()))?;
        let mut out = Outbox::new();
        let r = f(node, &mut out);
        self.dispatch(ep, out);
        self.schedule_wake(ep);
        Ok(r)
    }

    pub fn with_client<R>(&mut self, rank: u32, f: impl FnOnce(&mut ClientCore, Duration, &mut Outbox) -> R) -> Result<R, SimError> {
        let now = self.now;
        let ep = Endpoint::Client(rank);
        self.call(&ep, |n, out| match n {
            SimNode::Client(c) => Some(f(c, now, out)),
            _ => None,
        })?
        .ok_or(SimError::NoSuchNode(ep))
    }

    fn push(&mut self, at: Duration, item: Item) {
        self.counter += 1;
        self.items.insert(self.counter, item);
        self.heap.push(Reverse((at, self.counter)));
    }

    fn schedule_wake(&mut self, ep: &Endpoint) {
        if self.dead.contains(ep) {
            return;
        }
        let Some(node) = self.nodes.get(ep) else { return };
        let Some(mut t) = node.node_ref().next_wakeup() else { return };
        if t <= self.now {
            t = self.now + Duration::from_micros(100);
        }
        if self.wakes.get(ep).is_some_and(|&w| w <= t) {
            return;
        }
        self.wakes.insert(ep.clone(), t);
        self.push(t, Item::Wake(ep.clone()));
    }

    fn wire_size(pkt: &Packet) -> usize {
        let records = match &pkt.msg {
            Message::Put(p) => p.record.len(),
            Message::ReplPut(p) => p.record.len(),
            Message::GetResp(g) => g.pieces.iter().map(|p| p.len()).sum(),
            Message::ShuffleData(crate::wire::ShuffleData::Piece { piece, .. }) => piece.len(),
            _ => 0,
        };
        records as usize + 64
    }

    fn dispatch(&mut self, from: &Endpoint, out: Outbox) {
        for ev in out.events {
            self.on_event(from, ev);
        }
        for (to, mut pkt) in out.sends {
            if self.net.check_codec {
                let bytes = pkt.encode().expect("encode");
                let (frame, used) = crate::wire::decode_frame(&bytes).expect("decode");
                assert_eq!(used, bytes.len());
                let back = Packet::from_frame(frame).expect("payload");
                assert_eq!(back, pkt);
                pkt = back;
            }
            let mut delay = self.net.latency;
            if !self.net.jitter.is_zero() {
                delay += Duration::from_nanos(self.rng.random_range(0..self.net.jitter.as_nanos() as u64));
            }
            if let Some(bw) = self.net.bytes_per_sec {
                delay += Duration::from_nanos(Self::wire_size(&pkt) as u64 * 1_000_000_000 / bw);
            }
            let link = (from.clone(), to.clone());
            let mut at = self.now + delay;
            if let Some(&last) = self.links.get(&link) {
                at = at.max(last + Duration::from_nanos(1));
            }
            self.links.insert(link, at);
            self.push(
                at,
                Item::Deliver {
                    from: from.clone(),
                    to,
                    pkt,
                },
            );
        }
    }

    fn on_event(&mut self, from: &Endpoint, ev: Event) {
        if let Event::Redirect { target, free_bytes, .. } = &ev {
            let origin = match self.nodes.get(from) {
                Some(SimNode::Server(s)) => s.id().unwrap_or(u32::MAX),
                _ => u32::MAX,
            };
            let truth = self
                .live_servers()
                .into_iter()
                .filter_map(|s| s.id().map(|id| (id, s.free_bytes())))
                .collect();
            self.redirects.push(RedirectAudit {
                at: self.now,
                origin,
                target: *target,
                reported_free: *free_bytes,
                truth,
            });
        }
        if self.keep_log {
            self.log.push(EventRecord {
                at_ms: self.now.as_millis() as u64,
                node: from.to_string(),
                event: ev,
            });
        }
    }

    /// Process the next scheduled item. Returns false when nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(Reverse((at, id))) = self.heap.pop() else {
            return false;
        };
        let item = self.items.remove(&id).unwrap();
        self.now = self.now.max(at);
        match item {
            Item::Deliver { from, to, pkt } => {
                if !self.is_alive(&to) {
                    self.dropped += 1;
                    return true;
                }
                self.delivered += 1;
                let now = self.now;
                let _ = self.call(&to, |n, out| n.node().handle(now, &from, pkt, out));
            }
            Item::Wake(ep) => {
                if self.wakes.get(&ep) == Some(&at) {
                    self.wakes.remove(&ep);
                }
                if !self.is_alive(&ep) {
                    return true;
                }
                let now = self.now;
                let due = self.nodes[&ep].node_ref().next_wakeup().is_some_and(|w| w <= now);
                if due {
                    let _ = self.call(&ep, |n, out| n.node().tick(now, out));
                } else {
                    self.schedule_wake(&ep);
                }
            }
        }
        true
    }

    /// Advance virtual time by `d`, processing everything due before then.
    pub fn run_for(&mut self, d: Duration) {
        let end = self.now + d;
        while let Some(Reverse((at, _))) = self.heap.peek() {
            if *at > end {
                break;
            }
            self.step();
        }
        self.now = self.now.max(end);
    }

    /// Step until `pred` holds or `limit` of virtual time elapses.
    pub fn run_until(&mut self, limit: Duration, mut pred: impl FnMut(&Sim) -> bool) -> Result<(), SimError> {
        let deadline = self.now + limit;
        loop {
            if pred(self) {
                return Ok(());
            }
            match self.heap.peek() {
                Some(Reverse((at, _))) if *at <= deadline => {
                    self.step();
                }
                Some(_) => {
                    self.now = deadline;
                    return if pred(self) { Ok(()) } else { Err(SimError::Deadline(deadline)) };
                }
                None => return Err(SimError::Stalled(self.now)),
            }
        }
    }

    fn client_fatal(&self, rank: u32) -> Option<SimError> {
        let c = self.client(rank)?;
        c.fatal().map(|f| SimError::Client {
            rank,
            err: ClientError::Fatal(f.to_string()),
        })
    }

    /// Feed each client its records, keeping its window full, until every
    /// record is acknowledged.
    pub fn drive_writes(&mut self, mut jobs: Vec<(u32, RecordSource)>, limit: Duration) -> Result<(), SimError> {
        let deadline = self.now + limit;
        let mut exhausted = vec![false; jobs.len()];
        let mut staged: Vec<Option<(String, u64, Bytes)>> = vec![None; jobs.len()];
        loop {
            let mut idle = true;
            for (i, (rank, src)) in jobs.iter_mut().enumerate() {
                let rank = *rank;
                if let Some(e) = self.client_fatal(rank) {
                    return Err(e);
                }
                loop {
                    let can = self.client(rank).is_some_and(|c| c.can_write());
                    if !can {
                        break;
                    }
                    if staged[i].is_none() && !exhausted[i] {
                        staged[i] = src();
                        exhausted[i] = staged[i].is_none();
                    }
                    let Some((file, off, data)) = staged[i].take() else { break };
                    self.with_client(rank, |c, now, out| c.write(now, &file, off, data, out))?
                        .map_err(|err| SimError::Client { rank, err })?;
                }
                if !exhausted[i] || self.client(rank).is_some_and(|c| c.outstanding() > 0) {
                    idle = false;
                }
            }
            if idle {
                return Ok(());
            }
            if self.now > deadline {
                return Err(SimError::Deadline(deadline));
            }
            if !self.step() {
                return Err(SimError::Stalled(self.now));
            }
        }
    }

    /// Ask the manager to flush `epoch` on behalf of `rank` and wait.
    pub fn flush(&mut self, rank: u32, epoch: u32, limit: Duration) -> Result<(), SimError> {
        let op = self
            .with_client(rank, |c, _, out| c.start_flush(epoch, out))?
            .map_err(|err| SimError::Client { rank, err })?;
        let deadline = self.now + limit;
        loop {
            if let Some(r) = self.with_client(rank, |c, _, _| c.take_flush(op))? {
                return r.map_err(|err| SimError::Client { rank, err });
            }
            if self.now > deadline {
                return Err(SimError::Deadline(deadline));
            }
            if !self.step() {
                return Err(SimError::Stalled(self.now));
            }
        }
    }

    pub fn read(&mut self, rank: u32, file: &str, offset: u64, length: u64, epoch: u32, limit: Duration) -> Result<Bytes, SimError> {
        let op = self
            .with_client(rank, |c, now, out| c.start_read(now, file, offset, length, epoch, out))?
            .map_err(|err| SimError::Client { rank, err })?;
        let deadline = self.now + limit;
        loop {
            if let Some(r) = self.with_client(rank, |c, _, _| c.take_read(op))? {
                return r.map_err(|err| SimError::Client { rank, err });
            }
            if self.now > deadline {
                return Err(SimError::Deadline(deadline));
            }
            if !self.step() {
                return Err(SimError::Stalled(self.now));
            }
        }
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.log.iter()
    }
}

/// A manager, `servers` servers and `clients` clients with shared templates.
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub servers: usize,
    pub clients: u32,
    pub server: ServerConfig,
    pub manager: ManagerConfig,
    pub client: ClientConfig,
    pub net: NetModel,
    pub seed: u64,
}

pub const MANAGER_ADDR: &str = "10.0.0.1:7000";

pub fn server_addr(i: usize) -> String {
    format!("10.0.1.{}:7100", i + 1)
}

impl ClusterSpec {
    pub fn new(servers: usize, clients: u32, root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let mut server = ServerConfig::new(server_addr(0), MANAGER_ADDR);
        server.spill_dir = root.join("spill");
        server.pfs_dir = root.join("pfs");
        let mut manager = ManagerConfig::new(MANAGER_ADDR);
        manager.expected_servers = Some(servers);
        ClusterSpec {
            servers,
            clients,
            server,
            manager,
            client: ClientConfig::new(0, MANAGER_ADDR),
            net: NetModel::default(),
            seed: 1,
        }
    }

    pub fn server_config(&self, i: usize) -> ServerConfig {
        let mut c = self.server.clone();
        c.listen_addr = server_addr(i);
        c.manager_addr = self.manager.addr.clone();
        c
    }

    /// Build the cluster and run until every client holds a server list.
    pub fn start(&self) -> Result<Sim, SimError> {
        std::fs::create_dir_all(&self.server.spill_dir).ok();
        std::fs::create_dir_all(&self.server.pfs_dir).ok();
        let mut sim = Sim::new(self.seed, self.net.clone());
        sim.add_manager(self.manager.clone());
        for i in 0..self.servers {
            sim.add_server(self.server_config(i));
        }
        for rank in 0..self.clients {
            let mut c = self.client.clone();
            c.rank = rank;
            c.manager_addr = self.manager.addr.clone();
            sim.add_client(c);
        }
        let clients = self.clients;
        let servers = self.servers;
        sim.run_until(Duration::from_secs(30), |s| {
            (0..clients).all(|r| s.client(r).is_some_and(|c| c.is_ready()))
                && s.live_servers().iter().filter(|v| v.view().is_some()).count() == servers
        })?;
        Ok(sim)
    }
}

/// Records of `size` bytes covering `[0, total)` of `file`, in order.
pub fn sequential_records(file: &str, total: u64, size: u64, mut fill: impl FnMut(u64, &mut [u8]) + 'static) -> RecordSource {
    let file = file.to_string();
    let mut next = 0u64;
    Box::new(move || {
        if next >= total {
            return None;
        }
        let len = size.min(total - next);
        let mut buf = vec![0u8; len as usize];
        fill(next, &mut buf);
        let off = next;
        next += len;
        Some((file.clone(), off, Bytes::from(buf)))
    })
}

/// Queue of already-built records.
pub fn queued_records(records: impl IntoIterator<Item = (String, u64, Bytes)>) -> RecordSource {
    let mut q: VecDeque<_> = records.into_iter().collect();
    Box::new(move || q.pop_front())
}
