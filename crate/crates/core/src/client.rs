//! Client session: placement, the acknowledgement window, redirects,
//! failure confirmation, restart reads and flush requests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use thiserror::Error;

use crate::events::Event;
use crate::flush;
use crate::node::{Endpoint, Node, Outbox};
use crate::placement::{Placement, RecordKey, Strategy};
use crate::ring::ServerId;
use crate::store::WriteRecord;
use crate::wire::{
    ErrorCode, ErrorMsg, FlushCmd, GetReq, Lane, LookupReq, LookupRoute, Message, MsgType, Packet, Put, Register,
    Reporter, Role, ServerList, LATEST_EPOCH, PUT_FLAG_FORCE,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("no server list received yet")]
    NotReady,
    #[error("acknowledgement window is full")]
    WindowFull,
    #[error("session is closed")]
    Closed,
    #[error("{0} not found in the buffer")]
    NotFound(String),
    #[error("flush of epoch {0} failed")]
    FlushFailed(u32),
    #[error("session failed: {0}")]
    Fatal(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub rank: u32,
    pub manager_addr: String,
    pub placement: Strategy,
    pub window: usize,
    pub ack_timeout: Duration,
    /// How long to wait on the predecessor before reporting directly.
    pub confirm_timeout: Duration,
    pub read_timeout: Duration,
    pub register_retry: Duration,
    pub report_attempts: u32,
}

impl ClientConfig {
    pub fn new(rank: u32, manager_addr: impl Into<String>) -> Self {
        ClientConfig {
            rank,
            manager_addr: manager_addr.into(),
            placement: Strategy::Ketama,
            window: 16,
            ack_timeout: Duration::from_secs(5),
            confirm_timeout: Duration::from_secs(2),
            read_timeout: Duration::from_secs(3),
            register_retry: Duration::from_millis(500),
            report_attempts: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct PendingWrite {
    record: WriteRecord,
    home: ServerId,
    target: ServerId,
    redirects: u8,
    force: bool,
    /// Ack deadline; `None` while the target is under suspicion.
    deadline: Option<Duration>,
    resend_at: Option<Duration>,
}

#[derive(Debug, Clone)]
enum Suspicion {
    Confirming { deadline: Duration },
    Reported { deadline: Duration, attempts: u32 },
}

#[derive(Debug)]
enum ReadStage {
    Lookup,
    Fetch { owners_route: bool, waiting: HashSet<String> },
}

#[derive(Debug)]
struct ReadOp {
    file_id: String,
    offset: u64,
    length: u64,
    epoch: u32,
    stage: ReadStage,
    pieces: Vec<WriteRecord>,
    deadline: Duration,
}

/// Counters for tests and reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub writes: u64,
    pub acks: u64,
    pub redirects: u64,
    pub forced: u64,
    pub resends: u64,
    pub confirms_requested: u64,
    pub confirms_positive: u64,
    pub fail_reports: u64,
    pub lists_applied: u64,
    pub max_outstanding: usize,
}

pub struct ClientCore {
    cfg: ClientConfig,
    list: Option<ServerList>,
    placement: Option<Placement>,
    epoch: u32,
    next_seq: u64,
    next_op: u64,
    pending: BTreeMap<u64, PendingWrite>,
    suspects: HashMap<u32, Suspicion>,
    reads: HashMap<u64, ReadOp>,
    flushes: HashMap<u64, u32>,
    done_reads: HashMap<u64, Result<Bytes, ClientError>>,
    done_flushes: HashMap<u64, Result<(), ClientError>>,
    register_at: Option<Duration>,
    closed: bool,
    fatal: Option<String>,
    stats: ClientStats,
    rr: usize,
}

fn locate(p: &Placement, rank: u32, r: &WriteRecord) -> ServerId {
    p.locate(rank, &RecordKey::new(r.file_id.clone(), r.offset)).clone()
}

impl ClientCore {
    pub fn new(cfg: ClientConfig) -> Self {
        ClientCore {
            cfg,
            list: None,
            placement: None,
            epoch: 1,
            next_seq: 1,
            next_op: 1,
            pending: BTreeMap::new(),
            suspects: HashMap::new(),
            reads: HashMap::new(),
            flushes: HashMap::new(),
            done_reads: HashMap::new(),
            done_flushes: HashMap::new(),
            register_at: Some(Duration::ZERO),
            closed: false,
            fatal: None,
            stats: ClientStats::default(),
            rr: 0,
        }
    }

    pub fn rank(&self) -> u32 {
        self.cfg.rank
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn server_list(&self) -> Option<&ServerList> {
        self.list.as_ref()
    }

    pub fn is_ready(&self) -> bool {
        self.placement.is_some()
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    pub fn can_write(&self) -> bool {
        self.is_ready() && !self.closed && self.pending.len() < self.cfg.window
    }

    pub fn fatal(&self) -> Option<&str> {
        self.fatal.as_deref()
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Home server of a record under the current list.
    pub fn home_of(&self, file_id: &str, offset: u64) -> Option<ServerId> {
        self.placement
            .as_ref()
            .map(|p| p.locate(self.cfg.rank, &RecordKey::new(file_id, offset)).clone())
    }

    fn manager(&self) -> Endpoint {
        Endpoint::Node(self.cfg.manager_addr.clone())
    }

    fn send_put(&mut self, now: Duration, seq: u64, out: &mut Outbox) {
        let p = self.pending.get_mut(&seq).unwrap();
        p.deadline = Some(now + self.cfg.ack_timeout);
        p.resend_at = None;
        out.send(
            p.target.endpoint(),
            seq,
            Message::Put(Put {
                flags: if p.force { PUT_FLAG_FORCE } else { 0 },
                record: p.record.clone(),
            }),
        );
    }

    /// Queue one record. Fails if the window is full or the session is not
    /// usable; never blocks.
    pub fn write(&mut self, now: Duration, file_id: &str, offset: u64, payload: Bytes, out: &mut Outbox) -> Result<u64, ClientError> {
        if self.closed {
            return Err(ClientError::Closed);
        }
        if let Some(f) = &self.fatal {
            return Err(ClientError::Fatal(f.clone()));
        }
        let Some(placement) = self.placement.as_ref() else {
            return Err(ClientError::NotReady);
        };
        if self.pending.len() >= self.cfg.window {
            return Err(ClientError::WindowFull);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let record = WriteRecord {
            file_id: file_id.to_string(),
            offset,
            epoch: self.epoch,
            client: self.cfg.rank,
            seq,
            payload,
        };
        let home = locate(placement, self.cfg.rank, &record);
        self.pending.insert(
            seq,
            PendingWrite {
                record,
                target: home.clone(),
                home,
                redirects: 0,
                force: false,
                deadline: None,
                resend_at: None,
            },
        );
        self.stats.writes += 1;
        self.stats.max_outstanding = self.stats.max_outstanding.max(self.pending.len());
        self.send_put(now, seq, out);
        Ok(seq)
    }

    pub fn start_read(&mut self, now: Duration, file_id: &str, offset: u64, length: u64, epoch: u32, out: &mut Outbox) -> Result<u64, ClientError> {
        if self.closed {
            return Err(ClientError::Closed);
        }
        let list = self.list.as_ref().ok_or(ClientError::NotReady)?;
        if list.servers.is_empty() {
            return Err(ClientError::Fatal("empty server list".into()));
        }
        let op = self.next_op;
        self.next_op += 1;
        let server = list.servers[self.rr % list.servers.len()].clone();
        self.rr += 1;
        out.send(
            server.endpoint(),
            op,
            Message::LookupReq(LookupReq {
                file_id: file_id.to_string(),
                offset,
                length,
                epoch,
            }),
        );
        self.reads.insert(
            op,
            ReadOp {
                file_id: file_id.to_string(),
                offset,
                length,
                epoch,
                stage: ReadStage::Lookup,
                pieces: Vec::new(),
                deadline: now + self.cfg.read_timeout,
            },
        );
        Ok(op)
    }

    pub fn take_read(&mut self, op: u64) -> Option<Result<Bytes, ClientError>> {
        self.done_reads.remove(&op)
    }

    pub fn start_flush(&mut self, epoch: u32, out: &mut Outbox) -> Result<u64, ClientError> {
        if self.closed {
            return Err(ClientError::Closed);
        }
        let op = self.next_op;
        self.next_op += 1;
        self.flushes.insert(op, epoch);
        out.send(
            self.manager(),
            op,
            Message::FlushCmd(FlushCmd {
                flush_id: 0,
                epoch,
                abort: false,
                ordering: Vec::new(),
            }),
        );
        Ok(op)
    }

    pub fn take_flush(&mut self, op: u64) -> Option<Result<(), ClientError>> {
        self.done_flushes.remove(&op)
    }

    fn apply_list(&mut self, now: Duration, list: ServerList, out: &mut Outbox) {
        if self.list.as_ref().is_some_and(|l| l.version >= list.version) && self.placement.is_some() {
            return;
        }
        let placement = match Placement::new(self.cfg.placement, &list.servers) {
            Ok(p) => p,
            Err(e) => {
                self.fatal = Some(e.to_string());
                return;
            }
        };
        self.stats.lists_applied += 1;
        out.event(Event::ServerListApplied {
            version: list.version,
            servers: list.servers.iter().map(|s| s.id).collect(),
        });
        let live: HashSet<u32> = list.servers.iter().map(|s| s.id).collect();
        self.suspects
            .retain(|id, s| live.contains(id) || matches!(s, Suspicion::Confirming { .. }));
        let mut resend = Vec::new();
        for (&seq, p) in self.pending.iter_mut() {
            let home = locate(&placement, self.cfg.rank, &p.record);
            if home != p.home || !live.contains(&p.target.id) {
                p.home = home.clone();
                p.target = home;
                p.redirects = 0;
                p.force = false;
                resend.push(seq);
            }
        }
        self.list = Some(list);
        self.placement = Some(placement);
        self.register_at = None;
        for seq in resend {
            self.stats.resends += 1;
            out.event(Event::Resent {
                seq,
                target: self.pending[&seq].target.id,
            });
            self.send_put(now, seq, out);
        }
    }

    fn on_redirect(&mut self, now: Duration, seq: u64, target: ServerId, out: &mut Outbox) {
        let Some(p) = self.pending.get_mut(&seq) else { return };
        if p.redirects == 0 && target.id != p.home.id {
            p.redirects = 1;
            p.target = target;
            self.stats.redirects += 1;
        } else {
            p.target = p.home.clone();
            p.force = true;
            self.stats.forced += 1;
        }
        self.send_put(now, seq, out);
    }

    fn on_error(&mut self, now: Duration, seq: u64, e: ErrorMsg) {
        match e.request {
            MsgType::Put => {
                if let Some(p) = self.pending.get_mut(&seq) {
                    let wait = Duration::from_millis(e.retry_after_ms.max(1) as u64);
                    p.resend_at = Some(now + wait);
                    p.deadline = None;
                }
            }
            MsgType::FlushCmd => {
                if let Some(epoch) = self.flushes.remove(&seq) {
                    self.done_flushes.insert(seq, Err(ClientError::FlushFailed(epoch)));
                }
            }
            _ => {
                if e.code == ErrorCode::NotFound {
                    if let Some(r) = self.reads.remove(&seq) {
                        self.done_reads.insert(seq, Err(ClientError::NotFound(r.file_id)));
                    }
                }
            }
        }
    }

    fn predecessor_in_list(&self, subject: u32) -> Option<ServerId> {
        let list = self.list.as_ref()?;
        let i = list.servers.iter().position(|s| s.id == subject)?;
        let n = list.servers.len();
        let p = &list.servers[(i + n - 1) % n];
        (p.id != subject).then(|| p.clone())
    }

    fn subject_id(&self, id: u32) -> ServerId {
        self.list
            .as_ref()
            .and_then(|l| l.servers.iter().find(|s| s.id == id).cloned())
            .unwrap_or_else(|| ServerId::new(id, ""))
    }

    fn in_list(&self, id: u32) -> bool {
        self.list.as_ref().is_some_and(|l| l.servers.iter().any(|s| s.id == id))
    }

    fn report(&mut self, now: Duration, subject: u32, attempts: u32, out: &mut Outbox) {
        if !self.in_list(subject) {
            // The manager already dropped it.
            self.suspects.remove(&subject);
            return;
        }
        let version = self.list.as_ref().map_or(0, |l| l.version);
        out.send(
            self.manager(),
            0,
            Message::FailReport {
                subject: self.subject_id(subject),
                reporter: Reporter::Client(self.cfg.rank),
                version,
            },
        );
        self.stats.fail_reports += 1;
        out.event(Event::FailReported { subject });
        self.suspects.insert(
            subject,
            Suspicion::Reported {
                deadline: now + self.cfg.confirm_timeout,
                attempts,
            },
        );
    }

    fn suspect(&mut self, now: Duration, subject: u32, out: &mut Outbox) {
        if self.suspects.contains_key(&subject) {
            return;
        }
        match self.predecessor_in_list(subject) {
            Some(pred) => {
                out.send(
                    pred.endpoint(),
                    0,
                    Message::FailConfirmReq {
                        subject: self.subject_id(subject),
                    },
                );
                self.stats.confirms_requested += 1;
                out.event(Event::ConfirmRequested { subject, via: pred.id });
                self.suspects.insert(
                    subject,
                    Suspicion::Confirming {
                        deadline: now + self.cfg.confirm_timeout,
                    },
                );
            }
            None => self.report(now, subject, 1, out),
        }
    }

    fn on_confirm(&mut self, now: Duration, subject: u32, confirmed: bool, out: &mut Outbox) {
        if !matches!(self.suspects.get(&subject), Some(Suspicion::Confirming { .. })) {
            return;
        }
        out.event(Event::ConfirmResult { subject, confirmed });
        if confirmed {
            self.stats.confirms_positive += 1;
            self.report(now, subject, 1, out);
        } else {
            self.suspects.remove(&subject);
            let seqs: Vec<u64> = self
                .pending
                .iter()
                .filter(|(_, p)| p.target.id == subject && p.deadline.is_none() && p.resend_at.is_none())
                .map(|(s, _)| *s)
                .collect();
            for s in seqs {
                self.send_put(now, s, out);
            }
        }
    }

    fn fetch(&mut self, op: u64, route: LookupRoute, out: &mut Outbox) {
        let Some(list) = self.list.clone() else { return };
        let Some(r) = self.reads.get_mut(&op) else { return };
        let mut waiting = HashSet::new();
        let owners_route = matches!(route, LookupRoute::Owners { .. });
        match route {
            LookupRoute::Owners { owners, .. } => {
                for (s, off, len) in owners {
                    waiting.insert(s.addr.clone());
                    out.send(
                        s.endpoint(),
                        op,
                        Message::Get(GetReq {
                            file_id: r.file_id.clone(),
                            offset: off,
                            length: len,
                            epoch: r.epoch,
                            lane: Lane::Staged,
                        }),
                    );
                }
            }
            LookupRoute::Broadcast => {
                for s in &list.servers {
                    waiting.insert(s.addr.clone());
                    out.send(
                        s.endpoint(),
                        op,
                        Message::Get(GetReq {
                            file_id: r.file_id.clone(),
                            offset: r.offset,
                            length: r.length,
                            epoch: r.epoch,
                            lane: Lane::Ingest,
                        }),
                    );
                }
            }
        }
        r.pieces.clear();
        r.stage = ReadStage::Fetch { owners_route, waiting };
    }

    fn finish_read(&mut self, op: u64) {
        let Some(r) = self.reads.remove(&op) else { return };
        if r.pieces.is_empty() {
            self.done_reads.insert(op, Err(ClientError::NotFound(format!("{}@{}+{}", r.file_id, r.offset, r.length))));
            return;
        }
        let end = r.offset + r.length;
        let mut buf = BytesMut::zeroed(r.length as usize);
        for (off, data) in flush::resolve(r.pieces, r.offset, end) {
            let at = (off - r.offset) as usize;
            buf[at..at + data.len()].copy_from_slice(&data);
        }
        self.done_reads.insert(op, Ok(buf.freeze()));
    }

    fn on_get_resp(&mut self, from: &Endpoint, op: u64, last: bool, pieces: Vec<WriteRecord>) {
        let Some(r) = self.reads.get_mut(&op) else { return };
        let ReadStage::Fetch { waiting, .. } = &mut r.stage else { return };
        let Endpoint::Node(addr) = from else { return };
        if !waiting.contains(addr) {
            return;
        }
        r.pieces.extend(pieces);
        if last {
            waiting.remove(addr);
            if waiting.is_empty() {
                self.finish_read(op);
            }
        }
    }
}

impl Node for ClientCore {
    fn endpoint(&self) -> Endpoint {
        Endpoint::Client(self.cfg.rank)
    }

    fn start(&mut self, now: Duration, out: &mut Outbox) {
        out.send(
            self.manager(),
            0,
            Message::Register(Register {
                role: Role::Client,
                rank: self.cfg.rank,
                addr: String::new(),
            }),
        );
        self.register_at = Some(now + self.cfg.register_retry);
    }

    fn handle(&mut self, now: Duration, from: &Endpoint, pkt: Packet, out: &mut Outbox) {
        let seq = pkt.seq;
        match pkt.msg {
            Message::RingUpdate(list) => self.apply_list(now, list, out),
            Message::PutAck { .. } => {
                if self.pending.remove(&seq).is_some() {
                    self.stats.acks += 1;
                }
            }
            Message::Redirect { target, .. } => self.on_redirect(now, seq, target, out),
            Message::Error(e) => self.on_error(now, seq, e),
            Message::FailConfirmResp { subject, confirmed } => self.on_confirm(now, subject, confirmed, out),
            Message::LookupResp(route) => {
                if self.reads.get(&seq).is_some_and(|r| matches!(r.stage, ReadStage::Lookup)) {
                    self.fetch(seq, route, out);
                }
            }
            Message::GetResp(g) => self.on_get_resp(from, seq, g.last, g.pieces),
            Message::FlushDone(d) => {
                if let Some(epoch) = self.flushes.remove(&seq) {
                    let res = if d.ok { Ok(()) } else { Err(ClientError::FlushFailed(epoch)) };
                    self.done_flushes.insert(seq, res);
                }
            }
            other => out.event(Event::Error {
                detail: format!("client ignored {}", other.msg_type()),
            }),
        }
    }

    fn tick(&mut self, now: Duration, out: &mut Outbox) {
        if let Some(t) = self.register_at {
            if now >= t && self.placement.is_none() {
                self.start(now, out);
            }
        }
        let resend: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.resend_at.is_some_and(|t| t <= now))
            .map(|(s, _)| *s)
            .collect();
        for s in resend {
            self.send_put(now, s, out);
        }
        let late: Vec<(u64, u32)> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline.is_some_and(|t| t <= now))
            .map(|(s, p)| (*s, p.target.id))
            .collect();
        for (seq, target) in late {
            self.pending.get_mut(&seq).unwrap().deadline = None;
            self.suspect(now, target, out);
        }
        let due: Vec<(u32, Suspicion)> = self
            .suspects
            .iter()
            .filter(|(_, s)| match s {
                Suspicion::Confirming { deadline } | Suspicion::Reported { deadline, .. } => *deadline <= now,
            })
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        for (subject, s) in due {
            match s {
                Suspicion::Confirming { .. } => self.report(now, subject, 1, out),
                Suspicion::Reported { attempts, .. } if attempts < self.cfg.report_attempts => {
                    self.report(now, subject, attempts + 1, out)
                }
                Suspicion::Reported { .. } => {
                    self.suspects.remove(&subject);
                    self.fatal = Some(format!("manager did not answer the failure report for server {subject}"));
                }
            }
        }
        let late_reads: Vec<u64> = self
            .reads
            .iter()
            .filter(|(_, r)| r.deadline <= now)
            .map(|(k, _)| *k)
            .collect();
        for op in late_reads {
            let r = self.reads.get_mut(&op).unwrap();
            r.deadline = now + self.cfg.read_timeout;
            match &r.stage {
                ReadStage::Lookup | ReadStage::Fetch { owners_route: true, .. } => {
                    self.fetch(op, LookupRoute::Broadcast, out)
                }
                ReadStage::Fetch { owners_route: false, .. } => self.finish_read(op),
            }
        }
    }

    fn next_wakeup(&self) -> Option<Duration> {
        let mut t = self.register_at.filter(|_| self.placement.is_none());
        let mut take = |x: Option<Duration>| {
            if let Some(x) = x {
                t = Some(t.map_or(x, |c: Duration| c.min(x)));
            }
        };
        for p in self.pending.values() {
            take(p.deadline);
            take(p.resend_at);
        }
        for s in self.suspects.values() {
            match s {
                Suspicion::Confirming { deadline } | Suspicion::Reported { deadline, .. } => take(Some(*deadline)),
            }
        }
        for r in self.reads.values() {
            take(Some(r.deadline));
        }
        t
    }
}

/// Epoch value meaning "the newest data in the buffer" for reads.
pub const READ_LATEST: u32 = LATEST_EPOCH;
