//! The manager: ring bootstrap, membership authority, join admission, and
//! flush coordination.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::time::Duration;

use crate::events::Event;
use crate::node::{Endpoint, Node, Outbox};
use crate::ring::{Member, Membership, ServerId};
use crate::wire::{
    ErrorCode, ErrorMsg, FlushCmd, FlushDone, Message, MsgType, Packet, Register, Reporter, Role, ServerList,
};

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub addr: String,
    /// Initialise as soon as this many servers registered.
    pub expected_servers: Option<usize>,
    /// Registration window, counted from manager start.
    pub wait: Duration,
    /// Pause after an aborted flush before it is reissued.
    pub settle: Duration,
    pub flush_timeout: Duration,
    pub flush_attempts: u32,
}

impl ManagerConfig {
    pub fn new(addr: impl Into<String>) -> Self {
        ManagerConfig {
            addr: addr.into(),
            expected_servers: None,
            wait: Duration::from_secs(3),
            settle: Duration::from_millis(1500),
            flush_timeout: Duration::from_secs(60),
            flush_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Registering,
    Running,
    /// No server registered within the waiting period.
    Failed,
}

#[derive(Debug, Clone)]
struct FlushReq {
    epoch: u32,
    requester: Option<(Endpoint, u64)>,
    attempts: u32,
}

#[derive(Debug)]
struct FlushRun {
    id: u64,
    req: FlushReq,
    ordering: Vec<ServerId>,
    done: HashMap<u32, bool>,
    files: u32,
    bytes: u64,
    deadline: Duration,
}

pub struct Manager {
    cfg: ManagerConfig,
    phase: Phase,
    started: Option<Duration>,
    registrations: Vec<String>,
    members: Membership,
    version: u64,
    clients: BTreeSet<u32>,
    next_flush: u64,
    active: Option<FlushRun>,
    queue: VecDeque<FlushReq>,
    retry: Option<(Duration, FlushReq)>,
    completed_flushes: u64,
}

impl Manager {
    pub fn new(cfg: ManagerConfig) -> Self {
        Manager {
            cfg,
            phase: Phase::Registering,
            started: None,
            registrations: Vec::new(),
            members: Membership::new(),
            version: 0,
            clients: BTreeSet::new(),
            next_flush: 1,
            active: None,
            queue: VecDeque::new(),
            retry: None,
            completed_flushes: 0,
        }
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn membership(&self) -> &Membership {
        &self.members
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn server_list(&self) -> ServerList {
        ServerList {
            version: self.version,
            servers: self.members.live(),
        }
    }

    pub fn completed_flushes(&self) -> u64 {
        self.completed_flushes
    }

    pub fn flush_in_progress(&self) -> bool {
        self.active.is_some() || self.retry.is_some() || !self.queue.is_empty()
    }

    fn init_ring(&mut self, out: &mut Outbox) {
        let servers: Vec<ServerId> = self
            .registrations
            .iter()
            .enumerate()
            .map(|(i, a)| ServerId::new(i as u32, a.clone()))
            .collect();
        self.version = 1;
        self.members = Membership::from_servers(&servers, self.version);
        self.phase = Phase::Running;
        out.event(Event::RingInit {
            version: self.version,
            servers: servers.iter().map(|s| s.id).collect(),
        });
        self.broadcast(out);
    }

    fn broadcast(&self, out: &mut Outbox) {
        let list = self.server_list();
        for s in &list.servers {
            out.send(s.endpoint(), 0, Message::RingUpdate(list.clone()));
        }
        self.push_clients(out);
    }

    fn push_clients(&self, out: &mut Outbox) {
        let list = self.server_list();
        for &c in &self.clients {
            out.send(Endpoint::Client(c), 0, Message::RingUpdate(list.clone()));
        }
    }

    fn on_register(&mut self, now: Duration, from: &Endpoint, seq: u64, reg: Register, out: &mut Outbox) {
        match reg.role {
            Role::Hello => {}
            Role::Client => {
                self.clients.insert(reg.rank);
                if self.phase == Phase::Running {
                    out.send(from.clone(), seq, Message::RingUpdate(self.server_list()));
                }
            }
            Role::Server => match self.phase {
                Phase::Registering | Phase::Failed => {
                    if !self.registrations.contains(&reg.addr) {
                        self.registrations.push(reg.addr);
                    }
                    self.phase = Phase::Registering;
                    if self.cfg.expected_servers.is_some_and(|n| self.registrations.len() >= n) {
                        self.init_ring(out);
                    }
                }
                Phase::Running => {
                    if self.members.by_addr(&reg.addr).is_some() {
                        out.send(Endpoint::Node(reg.addr), 0, Message::RingUpdate(self.server_list()));
                    } else if let Some(last) = self.members.live().last().map(|s| s.id) {
                        self.on_join(now, reg.addr, last, out);
                    }
                }
            },
        }
    }

    fn on_join(&mut self, _now: Duration, addr: String, predecessor: u32, out: &mut Outbox) {
        if let Some(m) = self.members.by_addr(&addr) {
            if m.is_live() {
                out.send(Endpoint::Node(addr), 0, Message::RingUpdate(self.server_list()));
                return;
            }
        }
        if self.phase != Phase::Running || !self.members.is_live(predecessor) {
            out.event(Event::JoinRejected {
                addr: addr.clone(),
                predecessor,
            });
            out.send(
                Endpoint::Node(addr),
                0,
                Message::Error(ErrorMsg {
                    code: ErrorCode::Rejected,
                    request: MsgType::JoinReq,
                    retry_after_ms: 0,
                    detail: format!("predecessor {predecessor} is not a live member"),
                }),
            );
            return;
        }
        self.version += 1;
        let id = self.members.max_id().map_or(0, |m| m + 1);
        let server = ServerId::new(id, addr);
        self.members.insert(Member {
            server: server.clone(),
            anchor: Some(predecessor),
            joined: self.version,
            failed: None,
        });
        out.event(Event::MemberJoined { id, predecessor });
        let list = self.server_list();
        out.send(server.endpoint(), 0, Message::RingUpdate(list.clone()));
        if let Some(p) = self.members.get(predecessor) {
            out.send(p.server.endpoint(), 0, Message::RingUpdate(list));
        }
        self.push_clients(out);
    }

    fn on_fail_report(&mut self, now: Duration, from: &Endpoint, seq: u64, subject: ServerId, reporter: Reporter, out: &mut Outbox) {
        let self_report = matches!(reporter, Reporter::Server(r) if r == subject.id);
        if !self_report && self.members.is_live(subject.id) {
            self.version += 1;
            self.members.mark_failed(subject.id, self.version);
            out.event(Event::ServerFailed {
                subject: subject.id,
                version: self.version,
            });
            self.broadcast(out);
            if self
                .active
                .as_ref()
                .is_some_and(|r| r.ordering.iter().any(|s| s.id == subject.id))
            {
                self.abort_flush(now, out);
            }
        }
        if let Reporter::Client(_) = reporter {
            out.send(from.clone(), seq, Message::RingUpdate(self.server_list()));
        }
    }

    fn start_flush(&mut self, now: Duration, req: FlushReq, out: &mut Outbox) {
        let id = self.next_flush;
        self.next_flush += 1;
        let ordering = self.members.live();
        for s in &ordering {
            out.send(
                s.endpoint(),
                id,
                Message::FlushCmd(FlushCmd {
                    flush_id: id,
                    epoch: req.epoch,
                    abort: false,
                    ordering: ordering.clone(),
                }),
            );
        }
        out.event(Event::FlushStarted {
            flush_id: id,
            epoch: req.epoch,
            servers: ordering.len(),
        });
        self.active = Some(FlushRun {
            id,
            req,
            ordering,
            done: HashMap::new(),
            files: 0,
            bytes: 0,
            deadline: now + self.cfg.flush_timeout,
        });
    }

    fn maybe_start(&mut self, now: Duration, out: &mut Outbox) {
        if self.phase != Phase::Running || self.active.is_some() || self.retry.is_some() {
            return;
        }
        if let Some(req) = self.queue.pop_front() {
            self.start_flush(now, req, out);
        }
    }

    fn abort_flush(&mut self, now: Duration, out: &mut Outbox) {
        let Some(run) = self.active.take() else { return };
        for s in &run.ordering {
            out.send(
                s.endpoint(),
                run.id,
                Message::FlushCmd(FlushCmd {
                    flush_id: run.id,
                    epoch: run.req.epoch,
                    abort: true,
                    ordering: Vec::new(),
                }),
            );
        }
        out.event(Event::FlushAborted {
            flush_id: run.id,
            epoch: run.req.epoch,
        });
        let mut req = run.req;
        req.attempts += 1;
        if req.attempts >= self.cfg.flush_attempts {
            self.reply_flush(run.id, &req, false, (0, 0), out);
            self.maybe_start(now, out);
        } else {
            self.retry = Some((now + self.cfg.settle, req));
        }
    }

    fn reply_flush(&self, flush_id: u64, req: &FlushReq, ok: bool, totals: (u32, u64), out: &mut Outbox) {
        if let Some((to, seq)) = &req.requester {
            out.send(
                to.clone(),
                *seq,
                Message::FlushDone(FlushDone {
                    flush_id,
                    epoch: req.epoch,
                    from: u32::MAX,
                    ok,
                    files: totals.0,
                    bytes: totals.1,
                }),
            );
        }
    }

    fn on_flush_done(&mut self, now: Duration, d: FlushDone, out: &mut Outbox) {
        let Some(run) = self.active.as_mut() else { return };
        if run.id != d.flush_id {
            return;
        }
        if run.done.insert(d.from, d.ok).is_none() {
            run.files = run.files.max(d.files);
            run.bytes += d.bytes;
        }
        if run.ordering.iter().all(|s| run.done.contains_key(&s.id)) {
            let run = self.active.take().unwrap();
            let ok = run.done.values().all(|&v| v);
            self.completed_flushes += 1;
            out.event(Event::FlushFinished {
                flush_id: run.id,
                epoch: run.req.epoch,
                files: run.files as usize,
                bytes: run.bytes,
            });
            self.reply_flush(run.id, &run.req, ok, (run.files, run.bytes), out);
            self.maybe_start(now, out);
        }
    }
}

impl Node for Manager {
    fn endpoint(&self) -> Endpoint {
        Endpoint::Node(self.cfg.addr.clone())
    }

    fn start(&mut self, now: Duration, _out: &mut Outbox) {
        self.started = Some(now);
    }

    fn handle(&mut self, now: Duration, from: &Endpoint, pkt: Packet, out: &mut Outbox) {
        if self.started.is_none() {
            self.started = Some(now);
        }
        let seq = pkt.seq;
        match pkt.msg {
            Message::Register(reg) => self.on_register(now, from, seq, reg, out),
            Message::JoinReq { addr, predecessor } => self.on_join(now, addr, predecessor, out),
            Message::FailReport { subject, reporter, .. } => self.on_fail_report(now, from, seq, subject, reporter, out),
            Message::FlushCmd(cmd) => {
                self.queue.push_back(FlushReq {
                    epoch: cmd.epoch,
                    requester: Some((from.clone(), seq)),
                    attempts: 0,
                });
                self.maybe_start(now, out);
            }
            Message::FlushDone(d) => self.on_flush_done(now, d, out),
            Message::Ping { .. } => out.send(from.clone(), seq, Message::PingAck { from: u32::MAX }),
            other => out.event(Event::Error {
                detail: format!("manager ignored {} from {from}", other.msg_type()),
            }),
        }
    }

    fn tick(&mut self, now: Duration, out: &mut Outbox) {
        let started = *self.started.get_or_insert(now);
        if self.phase == Phase::Registering && now >= started + self.cfg.wait {
            if self.registrations.is_empty() {
                self.phase = Phase::Failed;
                out.event(Event::Error {
                    detail: "no server registered within the waiting period".into(),
                });
            } else {
                self.init_ring(out);
            }
        }
        if self.active.as_ref().is_some_and(|r| now >= r.deadline) {
            self.abort_flush(now, out);
        }
        if let Some((at, _)) = &self.retry {
            if now >= *at {
                let (_, req) = self.retry.take().unwrap();
                self.start_flush(now, req, out);
            }
        }
        self.maybe_start(now, out);
    }

    fn next_wakeup(&self) -> Option<Duration> {
        let reg = match (&self.phase, self.started) {
            (Phase::Registering, Some(s)) => Some(s + self.cfg.wait),
            (Phase::Registering, None) => Some(Duration::ZERO),
            _ => None,
        };
        [reg, self.active.as_ref().map(|r| r.deadline), self.retry.as_ref().map(|(t, _)| *t)]
            .into_iter()
            .flatten()
            .min()
    }
}
