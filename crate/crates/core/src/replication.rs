//! Chained replication along ring successors with acknowledgements sent
//! straight back to the primary, and re-replication after view changes.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use crate::node::{Endpoint, Outbox};
use crate::ring::{RingView, ServerId};
use crate::store::WriteRecord;
use crate::wire::{ErrorCode, ErrorMsg, Message, MsgType, ReplPut};

/// Number of extra copies a primary can place given its view.
pub fn replica_count(r: usize, view: &RingView) -> usize {
    r.min(view.peers().count())
}

#[derive(Debug, Clone)]
pub struct PendingPut {
    pub client: Endpoint,
    pub client_seq: u64,
    pub entry: u64,
    pub needed: usize,
    pub acks: HashSet<u32>,
    pub deadline: Duration,
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    target: u32,
    entry: u64,
    sent: Duration,
}

#[derive(Debug)]
pub struct Replicator {
    r: usize,
    timeout: Duration,
    next_rseq: u64,
    pending: HashMap<u64, PendingPut>,
    /// Entries each successor is known to hold.
    synced: HashMap<u32, HashSet<u64>>,
    inflight: HashMap<u64, InFlight>,
}

impl Replicator {
    pub fn new(r: usize, timeout: Duration) -> Self {
        Replicator {
            r,
            timeout,
            next_rseq: 1,
            pending: HashMap::new(),
            synced: HashMap::new(),
            inflight: HashMap::new(),
        }
    }

    pub fn replicas(&self) -> usize {
        self.r
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn alloc(&mut self) -> u64 {
        let s = self.next_rseq;
        self.next_rseq += 1;
        s
    }

    /// Start the chain for a record already appended locally. Returns `true`
    /// when no replica is needed and the caller should acknowledge at once.
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        &mut self,
        now: Duration,
        view: &RingView,
        rec: &WriteRecord,
        entry: u64,
        client: Endpoint,
        client_seq: u64,
        out: &mut Outbox,
    ) -> bool {
        let needed = replica_count(self.r, view);
        if needed == 0 {
            return true;
        }
        let rseq = self.alloc();
        let s0 = &view.successors[0];
        out.send(
            s0.endpoint(),
            rseq,
            Message::ReplPut(ReplPut {
                origin: view.me.id,
                hops_remaining: (needed - 1) as u8,
                record: rec.clone(),
            }),
        );
        self.pending.insert(
            rseq,
            PendingPut {
                client,
                client_seq,
                entry,
                needed,
                acks: HashSet::new(),
                deadline: now + self.timeout,
            },
        );
        false
    }

    /// Record an acknowledgement. Returns the client to answer when a put
    /// just became fully replicated.
    pub fn on_ack(&mut self, rseq: u64, acker: u32) -> Option<(Endpoint, u64)> {
        if let Some(f) = self.inflight.remove(&rseq) {
            if f.target == acker {
                self.synced.entry(acker).or_default().insert(f.entry);
            }
            return None;
        }
        let p = self.pending.get_mut(&rseq)?;
        p.acks.insert(acker);
        self.synced.entry(acker).or_default().insert(p.entry);
        if p.acks.len() >= p.needed {
            let p = self.pending.remove(&rseq).unwrap();
            return Some((p.client, p.client_seq));
        }
        None
    }

    /// Fail puts whose chain did not complete in time with a retryable error.
    pub fn expire(&mut self, now: Duration, retry_after: Duration, out: &mut Outbox) -> usize {
        let late: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(k, _)| *k)
            .collect();
        for k in &late {
            let p = self.pending.remove(k).unwrap();
            out.send(
                p.client,
                p.client_seq,
                Message::Error(ErrorMsg {
                    code: ErrorCode::Retry,
                    request: MsgType::Put,
                    retry_after_ms: retry_after.as_millis() as u32,
                    detail: "replication incomplete".into(),
                }),
            );
        }
        let timeout = self.timeout;
        self.inflight.retain(|_, f| f.sent + timeout > now);
        late.len()
    }

    pub fn next_deadline(&self) -> Option<Duration> {
        let a = self.pending.values().map(|p| p.deadline).min();
        let b = self.inflight.values().map(|f| f.sent + self.timeout).min();
        match (a, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Forget what a failed server held.
    pub fn forget(&mut self, server: u32) {
        self.synced.remove(&server);
        self.inflight.retain(|_, f| f.target != server);
    }

    pub fn is_synced(&self, target: u32, entry: u64) -> bool {
        self.synced.get(&target).is_some_and(|s| s.contains(&entry))
    }

    /// Ship every locally-primary entry that a current replica target is not
    /// known to hold. `read` materialises an entry. Returns how many were
    /// sent to each target.
    pub fn resync(
        &mut self,
        now: Duration,
        view: &RingView,
        primary: &[u64],
        mut read: impl FnMut(u64) -> Option<WriteRecord>,
        out: &mut Outbox,
    ) -> Vec<(u32, usize)> {
        let targets: Vec<ServerId> = view.peers().take(replica_count(self.r, view)).cloned().collect();
        let busy: HashSet<(u32, u64)> = self.inflight.values().map(|f| (f.target, f.entry)).collect();
        let chained: HashSet<u64> = self.pending.values().map(|p| p.entry).collect();
        let mut report = Vec::new();
        for t in targets {
            let mut shipped = 0;
            for &id in primary {
                if self.is_synced(t.id, id) || busy.contains(&(t.id, id)) || chained.contains(&id) {
                    continue;
                }
                let Some(rec) = read(id) else { continue };
                let rseq = self.alloc();
                out.send(
                    t.endpoint(),
                    rseq,
                    Message::ReplPut(ReplPut {
                        origin: view.me.id,
                        hops_remaining: 0,
                        record: rec,
                    }),
                );
                self.inflight.insert(
                    rseq,
                    InFlight {
                        target: t.id,
                        entry: id,
                        sent: now,
                    },
                );
                shipped += 1;
            }
            report.push((t.id, shipped));
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bytes::Bytes;

    fn view(n: u32, me: u32) -> RingView {
        crate::ring::init_views(
            &(0..n).map(|i| ServerId::new(i, format!("s{i}"))).collect::<Vec<_>>(),
            2,
        )[me as usize]
            .clone()
    }

    fn rec() -> WriteRecord {
        WriteRecord {
            file_id: "f".into(),
            offset: 0,
            epoch: 1,
            client: 0,
            seq: 1,
            payload: Bytes::from_static(b"x"),
        }
    }

    #[test]
    fn single_server_acks_immediately() {
        let mut r = Replicator::new(2, Duration::from_secs(1));
        let mut out = Outbox::new();
        assert!(r.start(Duration::ZERO, &view(1, 0), &rec(), 1, Endpoint::Client(0), 1, &mut out));
        assert!(out.sends.is_empty());
    }

    #[test]
    fn two_acks_complete_put() {
        let mut r = Replicator::new(2, Duration::from_secs(1));
        let mut out = Outbox::new();
        assert!(!r.start(Duration::ZERO, &view(4, 0), &rec(), 7, Endpoint::Client(3), 11, &mut out));
        let (to, pkt) = &out.sends[0];
        assert_eq!(to, &Endpoint::node("s1"));
        match &pkt.msg {
            Message::ReplPut(p) => assert_eq!(p.hops_remaining, 1),
            m => panic!("{m:?}"),
        }
        assert_eq!(r.on_ack(pkt.seq, 1), None);
        assert_eq!(r.on_ack(pkt.seq, 1), None);
        assert_eq!(r.on_ack(pkt.seq, 2), Some((Endpoint::Client(3), 11)));
        assert_eq!(r.on_ack(pkt.seq, 2), None);
    }

    #[test]
    fn replica_count_clamps_to_ring() {
        assert_eq!(replica_count(2, &view(2, 0)), 1);
        assert_eq!(replica_count(2, &view(6, 0)), 2);
    }

    #[test]
    fn resync_is_idempotent() {
        let mut r = Replicator::new(2, Duration::from_secs(1));
        let v = view(4, 0);
        let mut out = Outbox::new();
        let first = r.resync(Duration::ZERO, &v, &[1, 2, 3], |_| Some(rec()), &mut out);
        assert_eq!(first, vec![(1, 3), (2, 3)]);
        let again = r.resync(Duration::ZERO, &v, &[1, 2, 3], |_| Some(rec()), &mut out);
        assert_eq!(again, vec![(1, 0), (2, 0)]);
        for (to, pkt) in out.sends.clone() {
            let t = if to == Endpoint::node("s1") { 1 } else { 2 };
            r.on_ack(pkt.seq, t);
        }
        let after = r.resync(Duration::ZERO, &v, &[1, 2, 3], |_| Some(rec()), &mut out);
        assert_eq!(after, vec![(1, 0), (2, 0)]);
    }

    #[test]
    fn expired_put_gets_retryable_error() {
        let mut r = Replicator::new(1, Duration::from_millis(100));
        let mut out = Outbox::new();
        r.start(Duration::ZERO, &view(3, 0), &rec(), 1, Endpoint::Client(0), 5, &mut out);
        out.sends.clear();
        assert_eq!(r.expire(Duration::from_millis(50), Duration::from_millis(10), &mut out), 0);
        assert_eq!(r.expire(Duration::from_millis(100), Duration::from_millis(10), &mut out), 1);
        match &out.sends[0].1.msg {
            Message::Error(e) => assert_eq!(e.code, ErrorCode::Retry),
            m => panic!("{m:?}"),
        }
    }
}
