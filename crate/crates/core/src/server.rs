//! The buffer server: ingest with overload redirect, replication, ring
//! maintenance, flush participation and reads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::time::Duration;

use crate::events::Event;
use crate::flush::{self, FlushJob, FlushPlan, LookupEntry, LookupTable};
use crate::node::{Endpoint, Node, Outbox};
use crate::replication::Replicator;
use crate::ring::{RingConfig, RingNode, RingView, ServerId, ViewChange};
use crate::store::{Appended, IndexKey, Lane, Store, StoreConfig, StoreError, WriteRecord};
use crate::wire::{
    ErrorCode, ErrorMsg, FileExtent, FlushCmd, FlushDone, GetReq, GetResp, LookupReq, LookupRoute, MemQuery, Message,
    MsgType, Packet, Put, ReplPut, Register, Role, ShuffleData, ShuffleMeta, DEFAULT_MAX_PAYLOAD, LATEST_EPOCH,
};

pub const DEFAULT_MEM_CAPACITY: u64 = 1 << 30;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen_addr: String,
    pub manager_addr: String,
    pub mem_capacity: u64,
    pub spill_dir: PathBuf,
    pub spill_capacity: Option<u64>,
    pub spill_sync: bool,
    pub pfs_dir: PathBuf,
    pub replicas: usize,
    pub successors: usize,
    pub stabilize: Duration,
    pub miss_limit: u32,
    pub redirect: bool,
    /// How long a memory-query result is reused.
    pub query_ttl: Duration,
    pub query_timeout: Duration,
    pub repl_timeout: Duration,
    /// Epochs kept in the buffer after a flush.
    pub retained_epochs: u32,
    pub join_predecessor: Option<u32>,
    pub max_payload: usize,
}

impl ServerConfig {
    pub fn new(listen_addr: impl Into<String>, manager_addr: impl Into<String>) -> Self {
        let tmp = std::env::temp_dir();
        ServerConfig {
            listen_addr: listen_addr.into(),
            manager_addr: manager_addr.into(),
            mem_capacity: DEFAULT_MEM_CAPACITY,
            spill_dir: tmp.clone(),
            spill_capacity: None,
            spill_sync: true,
            pfs_dir: tmp.join("bb_pfs"),
            replicas: 2,
            successors: 2,
            stabilize: Duration::from_millis(500),
            miss_limit: 1,
            redirect: true,
            query_ttl: Duration::from_secs(1),
            query_timeout: Duration::from_millis(500),
            repl_timeout: Duration::from_millis(1500),
            retained_epochs: 2,
            join_predecessor: None,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

#[derive(Debug)]
struct WaitingPut {
    from: Endpoint,
    seq: u64,
    put: Put,
}

#[derive(Debug, Default)]
struct MemQueryState {
    cache: Option<(Duration, Option<(ServerId, u64)>)>,
    inflight: Option<(u64, Duration)>,
    next_token: u64,
    waiting: Vec<WaitingPut>,
}

pub struct ServerNode {
    cfg: ServerConfig,
    ring: RingNode,
    store: Store,
    repl: Replicator,
    table: LookupTable,
    jobs: BTreeMap<u64, FlushJob>,
    closed_jobs: HashSet<u64>,
    query: MemQueryState,
    next_register: Option<Duration>,
    rejected: bool,
}

fn error(code: ErrorCode, request: MsgType, retry: Duration, detail: impl Into<String>) -> Message {
    Message::Error(ErrorMsg {
        code,
        request,
        retry_after_ms: retry.as_millis() as u32,
        detail: detail.into(),
    })
}

impl ServerNode {
    pub fn new(cfg: ServerConfig) -> Self {
        let ring = RingNode::new(
            RingConfig {
                successors: cfg.successors,
                period: cfg.stabilize,
                miss_limit: cfg.miss_limit,
            },
            cfg.listen_addr.clone(),
            Endpoint::Node(cfg.manager_addr.clone()),
        );
        let safe_addr: String = cfg
            .listen_addr
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let store = Store::new(StoreConfig {
            mem_capacity: cfg.mem_capacity,
            spill_path: cfg.spill_dir.join(format!("bb_spill_{safe_addr}.log")),
            spill_capacity: cfg.spill_capacity,
            spill_sync: cfg.spill_sync,
        });
        let repl = Replicator::new(cfg.replicas, cfg.repl_timeout);
        ServerNode {
            cfg,
            ring,
            store,
            repl,
            table: LookupTable::new(),
            jobs: BTreeMap::new(),
            closed_jobs: HashSet::new(),
            query: MemQueryState::default(),
            next_register: Some(Duration::ZERO),
            rejected: false,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn view(&self) -> Option<&RingView> {
        self.ring.view()
    }

    pub fn ring(&self) -> &RingNode {
        &self.ring
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn lookup_table(&self) -> &LookupTable {
        &self.table
    }

    pub fn id(&self) -> Option<u32> {
        self.ring.me().map(|m| m.id)
    }

    pub fn free_bytes(&self) -> u64 {
        self.store.usage().free_bytes()
    }

    fn me(&self) -> Option<ServerId> {
        self.ring.me().cloned()
    }

    fn manager(&self) -> Endpoint {
        Endpoint::Node(self.cfg.manager_addr.clone())
    }

    fn retry_hint(&self) -> Duration {
        self.cfg.stabilize
    }

    fn register(&mut self, now: Duration, out: &mut Outbox) {
        let msg = match self.cfg.join_predecessor {
            Some(p) => Message::JoinReq {
                addr: self.cfg.listen_addr.clone(),
                predecessor: p,
            },
            None => Message::Register(Register {
                role: Role::Server,
                rank: 0,
                addr: self.cfg.listen_addr.clone(),
            }),
        };
        out.send(self.manager(), 0, msg);
        self.next_register = Some(now + self.cfg.stabilize);
    }

    fn on_view_change(&mut self, now: Duration, change: Option<ViewChange>, out: &mut Outbox) {
        let Some(change) = change else { return };
        let Some(me) = self.me() else { return };
        if change.old.is_none() {
            self.next_register = None;
            self.store
                .set_spill_path(self.cfg.spill_dir.join(Store::spill_file_name(me.id)));
        }
        for &f in &change.failed {
            self.repl.forget(f);
            let heir = self.ring.membership().live_successor_of(f).map(|s| s.id);
            if heir == Some(me.id) {
                let n = self.store.retag_origin(f, me.id);
                out.event(Event::Promoted { failed: f, records: n });
            }
        }
        self.resync(now, out);
    }

    fn resync(&mut self, now: Duration, out: &mut Outbox) {
        let (Some(view), Some(me)) = (self.ring.view().cloned(), self.me()) else {
            return;
        };
        let primary = self.store.ids_with_origin(me.id);
        if primary.is_empty() {
            return;
        }
        let store = &self.store;
        let report = self
            .repl
            .resync(now, &view, &primary, |id| store.read_id(id).ok(), out);
        for (target, shipped) in report {
            if shipped > 0 {
                out.event(Event::Resync { target, shipped });
            }
        }
    }

    // ---- ingest ----

    fn handle_put(&mut self, now: Duration, from: &Endpoint, seq: u64, put: Put, out: &mut Outbox) {
        let Some(me) = self.me() else {
            out.send(from.clone(), seq, error(ErrorCode::Retry, MsgType::Put, self.retry_hint(), "ring not ready"));
            return;
        };
        if self.ring.is_isolated() {
            out.send(from.clone(), seq, error(ErrorCode::Retry, MsgType::Put, self.retry_hint(), "server isolated"));
            return;
        }
        let rec = &put.record;
        let key = IndexKey {
            lane: Lane::Ingest,
            file_id: rec.file_id.clone(),
            offset: rec.offset,
            epoch: rec.epoch,
        };
        if let Some(e) = self.store.lookup(&key).copied() {
            if (e.client, e.seq) == (rec.client, rec.seq) {
                // A resend: this server is now the primary, re-run the chain.
                self.store.set_origin(e.id, me.id);
                self.replicate(now, from.clone(), seq, put.record, e.id, out);
                return;
            }
            if (e.seq, e.client) > (rec.seq, rec.client) {
                out.send(from.clone(), seq, Message::PutAck { server: me.id });
                return;
            }
        }
        let needs_redirect = !put.forced()
            && self.cfg.redirect
            && self.ring.membership().live_count() >= 2
            && !self.store.fits_in_memory(rec.footprint());
        if needs_redirect {
            let waiting = WaitingPut {
                from: from.clone(),
                seq,
                put,
            };
            match &self.query.cache {
                Some((at, choice)) if now < *at + self.cfg.query_ttl => {
                    let choice = choice.clone();
                    self.decide(now, waiting, choice, out);
                }
                _ => {
                    self.query.waiting.push(waiting);
                    self.start_mem_query(now, out);
                }
            }
            return;
        }
        self.store_and_replicate(now, from.clone(), seq, put.record, out);
    }

    fn store_and_replicate(&mut self, now: Duration, from: Endpoint, seq: u64, rec: WriteRecord, out: &mut Outbox) {
        let Some(me) = self.me() else { return };
        match self.store.append(Lane::Ingest, &rec, me.id) {
            Ok(Appended::Stored(_, id)) | Ok(Appended::Duplicate(id)) => {
                self.store.set_origin(id, me.id);
                self.replicate(now, from, seq, rec, id, out);
            }
            Ok(Appended::Superseded(_)) => out.send(from, seq, Message::PutAck { server: me.id }),
            Err(StoreError::Exhausted { .. }) => out.send(
                from,
                seq,
                error(ErrorCode::StorageExhausted, MsgType::Put, self.retry_hint() * 2, "spill space exhausted"),
            ),
            Err(e) => out.send(from, seq, error(ErrorCode::Retry, MsgType::Put, self.retry_hint(), e.to_string())),
        }
    }

    fn replicate(&mut self, now: Duration, from: Endpoint, seq: u64, rec: WriteRecord, id: u64, out: &mut Outbox) {
        let (Some(view), Some(me)) = (self.ring.view().cloned(), self.me()) else {
            return;
        };
        if self.repl.start(now, &view, &rec, id, from.clone(), seq, out) {
            out.send(from, seq, Message::PutAck { server: me.id });
        }
    }

    fn start_mem_query(&mut self, now: Duration, out: &mut Outbox) {
        if self.query.inflight.is_some() {
            return;
        }
        let (Some(view), Some(me)) = (self.ring.view().cloned(), self.me()) else {
            return;
        };
        let s0 = &view.successors[0];
        if s0.id == me.id {
            self.finish_mem_query(now, None, out);
            return;
        }
        self.query.next_token += 1;
        let token = self.query.next_token;
        self.query.inflight = Some((token, now + self.cfg.query_timeout));
        out.send(
            s0.endpoint(),
            token,
            Message::MemQuery(MemQuery {
                origin: me,
                visited: Vec::new(),
            }),
        );
    }

    fn finish_mem_query(&mut self, now: Duration, choice: Option<(ServerId, u64)>, out: &mut Outbox) {
        self.query.inflight = None;
        self.query.cache = Some((now, choice.clone()));
        for w in std::mem::take(&mut self.query.waiting) {
            self.decide(now, w, choice.clone(), out);
        }
    }

    /// Redirect to the chosen peer when it can take the record, otherwise
    /// keep it here (spilling if needed).
    fn decide(&mut self, now: Duration, w: WaitingPut, choice: Option<(ServerId, u64)>, out: &mut Outbox) {
        let rec = &w.put.record;
        if self.store.fits_in_memory(rec.footprint()) {
            self.store_and_replicate(now, w.from, w.seq, w.put.record, out);
            return;
        }
        match choice {
            Some((target, free)) if free >= rec.footprint() && self.ring.membership().is_live(target.id) => {
                out.event(Event::Redirect {
                    client: rec.client,
                    seq: rec.seq,
                    target: target.id,
                    free_bytes: free,
                });
                out.send(w.from, w.seq, Message::Redirect { target, free_bytes: free });
            }
            _ => {
                out.event(Event::StoredLocally {
                    client: rec.client,
                    seq: rec.seq,
                    spilled: true,
                });
                self.store_and_replicate(now, w.from, w.seq, w.put.record, out);
            }
        }
    }

    fn handle_mem_query(&mut self, seq: u64, mut q: MemQuery, out: &mut Outbox) {
        let (Some(view), Some(me)) = (self.ring.view().cloned(), self.me()) else {
            return;
        };
        if q.visited.iter().all(|(s, _)| s.id != me.id) {
            q.visited.push((me.clone(), self.free_bytes()));
        }
        let next = &view.successors[0];
        let done = next.id == q.origin.id || next.id == me.id || q.visited.iter().any(|(s, _)| s.id == next.id);
        if done {
            out.send(q.origin.endpoint(), seq, Message::MemResp(q));
        } else {
            out.send(next.endpoint(), seq, Message::MemQuery(q));
        }
    }

    fn handle_mem_resp(&mut self, now: Duration, seq: u64, q: MemQuery, out: &mut Outbox) {
        if self.query.inflight.map(|(t, _)| t) != Some(seq) {
            return;
        }
        let me = self.id();
        let members = self.ring.membership();
        let best = q
            .visited
            .into_iter()
            .filter(|(s, _)| Some(s.id) != me && members.is_live(s.id))
            .min_by(|a, b| b.1.cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        self.finish_mem_query(now, best, out);
    }

    fn handle_repl_put(&mut self, from: &Endpoint, seq: u64, rp: ReplPut, out: &mut Outbox) {
        let (Some(view), Some(me)) = (self.ring.view().cloned(), self.me()) else {
            return;
        };
        match self.store.append(Lane::Ingest, &rp.record, rp.origin) {
            Ok(_) => {}
            Err(e) => {
                out.event(Event::Error {
                    detail: format!("replica append failed: {e}"),
                });
                return;
            }
        }
        let origin_ep = self
            .ring
            .membership()
            .get(rp.origin)
            .map(|m| m.server.endpoint())
            .unwrap_or_else(|| from.clone());
        out.send(origin_ep, seq, Message::ReplAck { rseq: seq, acker: me.id });
        if rp.hops_remaining > 0 {
            let next = &view.successors[0];
            if next.id != rp.origin && next.id != me.id {
                out.send(
                    next.endpoint(),
                    seq,
                    Message::ReplPut(ReplPut {
                        origin: rp.origin,
                        hops_remaining: rp.hops_remaining - 1,
                        record: rp.record,
                    }),
                );
            }
        }
    }

    // ---- reads ----

    fn handle_get(&mut self, from: &Endpoint, seq: u64, g: GetReq, out: &mut Outbox) {
        let end = g.offset.saturating_add(g.length);
        let max_epoch = g.epoch;
        let mut pieces = Vec::new();
        for (k, e) in self.store.overlapping(g.lane, &g.file_id, g.offset, end, max_epoch) {
            if let Ok(r) = self.store.read(k, e) {
                pieces.extend(r.clip(g.offset, end));
            }
        }
        let budget = self.cfg.max_payload / 2;
        let mut batch: Vec<WriteRecord> = Vec::new();
        let mut size = 0;
        for p in pieces {
            if !batch.is_empty() && size + p.payload.len() > budget {
                out.send(
                    from.clone(),
                    seq,
                    Message::GetResp(GetResp {
                        last: false,
                        pieces: std::mem::take(&mut batch),
                    }),
                );
                size = 0;
            }
            size += p.payload.len();
            batch.push(p);
        }
        out.send(from.clone(), seq, Message::GetResp(GetResp { last: true, pieces: batch }));
    }

    fn handle_lookup(&self, from: &Endpoint, seq: u64, l: LookupReq, out: &mut Outbox) {
        let route = match self.table.get(&l.file_id) {
            Some(e) if l.epoch != LATEST_EPOCH && e.epoch == l.epoch => {
                match flush::lookup_owner(&self.table, &l.file_id, l.offset, l.length) {
                    Ok(owners) => LookupRoute::Owners { epoch: e.epoch, owners },
                    Err(_) => LookupRoute::Broadcast,
                }
            }
            _ => LookupRoute::Broadcast,
        };
        out.send(from.clone(), seq, Message::LookupResp(route));
    }

    // ---- flush ----

    fn job(&mut self, flush_id: u64) -> Option<&mut FlushJob> {
        if self.closed_jobs.contains(&flush_id) {
            return None;
        }
        Some(self.jobs.entry(flush_id).or_insert_with(|| FlushJob::new(flush_id)))
    }

    fn local_extents(&self, epoch: u32) -> Vec<FileExtent> {
        let Some(me) = self.id() else { return Vec::new() };
        let mut out = Vec::new();
        for f in self.store.files(Lane::Ingest) {
            let segs = self.store.scan_origin(Lane::Ingest, &f, epoch, me);
            if segs.is_empty() {
                continue;
            }
            out.push(FileExtent {
                extent: segs.iter().map(|s| s.offset + s.length as u64).max().unwrap(),
                max_epoch: segs.iter().map(|s| s.epoch).max().unwrap(),
                file_id: f,
            });
        }
        out
    }

    fn handle_flush_cmd(&mut self, now: Duration, cmd: FlushCmd, out: &mut Outbox) {
        if cmd.abort {
            if self.jobs.remove(&cmd.flush_id).is_some() || !self.closed_jobs.contains(&cmd.flush_id) {
                out.event(Event::FlushAborted {
                    flush_id: cmd.flush_id,
                    epoch: cmd.epoch,
                });
            }
            self.closed_jobs.insert(cmd.flush_id);
            return;
        }
        let Some(me) = self.me() else { return };
        // Anyone the manager left out is gone; promote their data first.
        let listed: HashSet<u32> = cmd.ordering.iter().map(|s| s.id).collect();
        let missing: Vec<u32> = self
            .ring
            .membership()
            .members()
            .iter()
            .filter(|m| m.is_live() && !listed.contains(&m.server.id))
            .map(|m| m.server.id)
            .collect();
        for id in missing {
            let ch = self.ring.declare_failed(now, id, out);
            self.on_view_change(now, ch, out);
        }
        let extents = self.local_extents(cmd.epoch);
        let Some(job) = self.job(cmd.flush_id) else { return };
        job.epoch = cmd.epoch;
        job.ordering = Some(cmd.ordering.clone());
        out.event(Event::FlushStarted {
            flush_id: cmd.flush_id,
            epoch: cmd.epoch,
            servers: cmd.ordering.len(),
        });
        for s in &cmd.ordering {
            if s.id == me.id {
                continue;
            }
            out.send(
                s.endpoint(),
                cmd.flush_id,
                Message::ShuffleMeta(ShuffleMeta {
                    flush_id: cmd.flush_id,
                    from: me.id,
                    files: extents.clone(),
                }),
            );
        }
        if let Some(job) = self.job(cmd.flush_id) {
            job.metas.insert(me.id, extents);
        }
        self.progress(cmd.flush_id, out);
    }

    fn handle_shuffle_meta(&mut self, m: ShuffleMeta, out: &mut Outbox) {
        if let Some(job) = self.job(m.flush_id) {
            job.metas.insert(m.from, m.files);
            self.progress(m.flush_id, out);
        }
    }

    fn handle_shuffle_data(&mut self, d: ShuffleData, out: &mut Outbox) {
        match d {
            ShuffleData::Piece { flush_id, from, piece } => {
                if self.closed_jobs.contains(&flush_id) {
                    return;
                }
                let ok = self.store.append(Lane::Staged, &piece, from).is_ok();
                let job = self.job(flush_id).unwrap();
                *job.received.entry(from).or_insert(0) += 1;
                if !ok {
                    job.failed = true;
                }
                self.progress(flush_id, out);
            }
            ShuffleData::End { flush_id, from, count } => {
                if let Some(job) = self.job(flush_id) {
                    job.ends.insert(from, count);
                    self.progress(flush_id, out);
                }
            }
        }
    }

    fn progress(&mut self, flush_id: u64, out: &mut Outbox) {
        let Some(me) = self.me() else { return };
        let Some(job) = self.jobs.get_mut(&flush_id) else { return };
        if job.finished {
            return;
        }
        if job.plans.is_none() && job.has_all_metas() {
            let ordering = job.ordering.clone().unwrap();
            let n = ordering.len();
            let metas = flush::merge_metadata(job.epoch, job.metas.values().map(|v| v.as_slice()));
            let plans: BTreeMap<String, FlushPlan> = metas
                .into_values()
                .map(|m| (m.file_id.clone(), FlushPlan::new(m.file_id, m.global_size, n)))
                .collect();
            job.plans = Some(plans.clone());
            let epoch = job.epoch;
            let mut sent: HashMap<u32, u64> = HashMap::new();
            let mut local = 0u64;
            let mut failed = false;
            for plan in plans.values() {
                for seg in self.store.scan_origin(Lane::Ingest, &plan.file_id, epoch, me.id) {
                    let Ok(rec) = self.store.read_id(seg.id) else {
                        failed = true;
                        continue;
                    };
                    for (owner, off, len) in plan.split(rec.offset, rec.len()) {
                        let piece = rec.clip(off, off + len).unwrap();
                        let dest = &ordering[owner];
                        if dest.id == me.id {
                            failed |= self.store.append(Lane::Staged, &piece, me.id).is_err();
                            local += 1;
                        } else {
                            *sent.entry(dest.id).or_insert(0) += 1;
                            out.send(
                                dest.endpoint(),
                                flush_id,
                                Message::ShuffleData(ShuffleData::Piece {
                                    flush_id,
                                    from: me.id,
                                    piece,
                                }),
                            );
                        }
                    }
                }
            }
            for s in &ordering {
                if s.id != me.id {
                    out.send(
                        s.endpoint(),
                        flush_id,
                        Message::ShuffleData(ShuffleData::End {
                            flush_id,
                            from: me.id,
                            count: sent.get(&s.id).copied().unwrap_or(0),
                        }),
                    );
                }
            }
            let job = self.jobs.get_mut(&flush_id).unwrap();
            *job.received.entry(me.id).or_insert(0) += local;
            job.ends.insert(me.id, local);
            job.shipped = true;
            job.failed |= failed;
        }
        let job = self.jobs.get_mut(&flush_id).unwrap();
        if job.shuffle_complete() {
            job.finished = true;
            let job = self.jobs.remove(&flush_id).unwrap();
            self.closed_jobs.insert(flush_id);
            self.write_out(job, &me, out);
        }
    }

    fn write_out(&mut self, job: FlushJob, me: &ServerId, out: &mut Outbox) {
        let ordering = job.ordering.unwrap();
        let plans = job.plans.unwrap_or_default();
        let idx = ordering.iter().position(|s| s.id == me.id);
        let mut ok = !job.failed && idx.is_some();
        let mut bytes = 0;
        if let Some(idx) = idx {
            for plan in plans.values() {
                let (lo, hi) = plan.domain(idx);
                let mut pieces = Vec::new();
                if lo < hi {
                    for (k, e) in self.store.overlapping(Lane::Staged, &plan.file_id, lo, hi, job.epoch) {
                        match self.store.read(k, e) {
                            Ok(r) => pieces.push(r),
                            Err(_) => ok = false,
                        }
                    }
                }
                let runs = flush::coalesce(flush::resolve(pieces, lo, hi), 8 << 20);
                match flush::write_domain(&self.cfg.pfs_dir, &plan.file_id, plan.global_size, &runs) {
                    Ok(n) => bytes += n,
                    Err(e) => {
                        ok = false;
                        out.event(Event::Error {
                            detail: format!("flush of {} failed: {e}", plan.file_id),
                        });
                    }
                }
            }
        }
        if ok {
            for plan in plans.values() {
                self.table.record(
                    &plan.file_id,
                    LookupEntry {
                        global_size: plan.global_size,
                        n: plan.n,
                        ordering: ordering.clone(),
                        epoch: job.epoch,
                    },
                );
            }
            if let Some(old) = job.epoch.checked_sub(self.cfg.retained_epochs) {
                self.store.purge(Lane::Ingest, old);
                self.store.purge(Lane::Staged, old);
            }
        }
        out.event(Event::FlushFinished {
            flush_id: job.flush_id,
            epoch: job.epoch,
            files: plans.len(),
            bytes,
        });
        out.send(
            self.manager(),
            job.flush_id,
            Message::FlushDone(FlushDone {
                flush_id: job.flush_id,
                epoch: job.epoch,
                from: me.id,
                ok,
                files: plans.len() as u32,
                bytes,
            }),
        );
    }
}

impl Node for ServerNode {
    fn endpoint(&self) -> Endpoint {
        Endpoint::Node(self.cfg.listen_addr.clone())
    }

    fn start(&mut self, now: Duration, out: &mut Outbox) {
        self.register(now, out);
    }

    fn handle(&mut self, now: Duration, from: &Endpoint, pkt: Packet, out: &mut Outbox) {
        let seq = pkt.seq;
        match pkt.msg {
            Message::Put(p) => self.handle_put(now, from, seq, p, out),
            Message::ReplPut(rp) => self.handle_repl_put(from, seq, rp, out),
            Message::ReplAck { rseq, acker } => {
                if let Some((client, cseq)) = self.repl.on_ack(rseq, acker) {
                    if let Some(me) = self.id() {
                        out.send(client, cseq, Message::PutAck { server: me });
                    }
                }
            }
            Message::Get(g) => self.handle_get(from, seq, g, out),
            Message::LookupReq(l) => self.handle_lookup(from, seq, l, out),
            Message::MemQuery(q) => self.handle_mem_query(seq, q, out),
            Message::MemResp(q) => self.handle_mem_resp(now, seq, q, out),
            Message::Ping { .. } => self.ring.on_ping(from, seq, out),
            Message::PingAck { from: id } => self.ring.on_ping_ack(from, id, out),
            Message::NeighborQuery(info) => {
                let ch = self.ring.on_neighbor_query(now, from, &info, out);
                self.on_view_change(now, ch, out);
            }
            Message::NeighborResp(info) => {
                let ch = self.ring.on_neighbor_resp(now, &info, out);
                self.on_view_change(now, ch, out);
            }
            Message::FailConfirmReq { subject } => self.ring.on_fail_confirm_req(now, from, seq, &subject, out),
            Message::RingUpdate(list) => {
                let ch = self.ring.on_ring_update(now, &list, out);
                self.on_view_change(now, ch, out);
            }
            Message::FlushCmd(cmd) => self.handle_flush_cmd(now, cmd, out),
            Message::ShuffleMeta(m) => self.handle_shuffle_meta(m, out),
            Message::ShuffleData(d) => self.handle_shuffle_data(d, out),
            Message::Error(e) if e.request == MsgType::JoinReq => {
                self.rejected = true;
                self.next_register = None;
                out.event(Event::Error { detail: e.detail });
            }
            other => out.event(Event::Error {
                detail: format!("unexpected {} from {from}", other.msg_type()),
            }),
        }
    }

    fn tick(&mut self, now: Duration, out: &mut Outbox) {
        if let Some(t) = self.next_register {
            if now >= t && self.ring.view().is_none() && !self.rejected {
                self.register(now, out);
            }
        }
        let changes = self.ring.tick(now, out);
        for ch in changes {
            self.on_view_change(now, Some(ch), out);
        }
        if let Some((_, deadline)) = self.query.inflight {
            if now >= deadline {
                self.finish_mem_query(now, None, out);
            }
        }
        self.repl.expire(now, self.retry_hint(), out);
        self.resync(now, out);
    }

    fn next_wakeup(&self) -> Option<Duration> {
        [
            self.ring.next_wakeup(),
            self.repl.next_deadline(),
            self.query.inflight.map(|(_, d)| d),
            self.next_register.filter(|_| self.ring.view().is_none() && !self.rejected),
        ]
        .into_iter()
        .flatten()
        .min()
    }
}
