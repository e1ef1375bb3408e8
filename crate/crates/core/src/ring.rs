//! Ring membership and stabilization.
//!
//! Membership is an ordered list of servers with tombstones. Joins are
//! inserted after a named predecessor (ties broken by join version, newest
//! first), failures are sticky, and any two lists merge to the same order.
//! Each server derives its [`RingView`] from the live members.

use std::fmt;
use std::time::Duration;

use crate::events::Event;
use crate::node::{Endpoint, Outbox};
use crate::wire::{Message, NeighborInfo, Reporter, ServerList};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServerId {
    pub id: u32,
    pub addr: String,
}

impl ServerId {
    pub fn new(id: u32, addr: impl Into<String>) -> Self {
        ServerId {
            id,
            addr: addr.into(),
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::Node(self.addr.clone())
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}({})", self.id, self.addr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub server: ServerId,
    /// Ordinal this member was inserted after; `None` for the ring head.
    pub anchor: Option<u32>,
    /// Membership version at which the member joined.
    pub joined: u64,
    /// Version at which the member was declared failed.
    pub failed: Option<u64>,
}

impl Member {
    pub fn is_live(&self) -> bool {
        self.failed.is_none()
    }

    fn stamp(&self) -> (u64, u32) {
        (self.joined, self.server.id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Membership {
    list: Vec<Member>,
}

impl Membership {
    pub fn new() -> Self {
        Membership::default()
    }

    /// Ring in the given order, every member joined at `version`.
    pub fn from_servers(servers: &[ServerId], version: u64) -> Self {
        let mut m = Membership::new();
        let mut prev = None;
        for s in servers {
            m.insert(Member {
                server: s.clone(),
                anchor: prev,
                joined: version,
                failed: None,
            });
            prev = Some(s.id);
        }
        m
    }

    pub fn members(&self) -> &[Member] {
        &self.list
    }

    pub fn get(&self, id: u32) -> Option<&Member> {
        self.list.iter().find(|m| m.server.id == id)
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.list.iter().position(|m| m.server.id == id)
    }

    pub fn is_live(&self, id: u32) -> bool {
        self.get(id).is_some_and(|m| m.is_live())
    }

    pub fn by_addr(&self, addr: &str) -> Option<&Member> {
        self.list.iter().find(|m| m.server.addr == addr)
    }

    pub fn live(&self) -> Vec<ServerId> {
        self.list
            .iter()
            .filter(|m| m.is_live())
            .map(|m| m.server.clone())
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.list.iter().filter(|m| m.is_live()).count()
    }

    pub fn max_id(&self) -> Option<u32> {
        self.list.iter().map(|m| m.server.id).max()
    }

    /// Insert or merge one member. Returns whether anything changed.
    pub fn insert(&mut self, m: Member) -> bool {
        if let Some(pos) = self.position(m.server.id) {
            let cur = &mut self.list[pos];
            return match (cur.failed, m.failed) {
                (None, Some(v)) => {
                    cur.failed = Some(v);
                    true
                }
                (Some(a), Some(b)) if b < a => {
                    cur.failed = Some(b);
                    false
                }
                _ => false,
            };
        }
        let mut i = match m.anchor {
            None => 0,
            Some(a) => match self.position(a) {
                Some(p) => p + 1,
                None => self.list.len(),
            },
        };
        while i < self.list.len() && self.list[i].stamp() > m.stamp() {
            i += 1;
        }
        self.list.insert(i, m);
        true
    }

    pub fn mark_failed(&mut self, id: u32, version: u64) -> bool {
        match self.list.iter_mut().find(|m| m.server.id == id) {
            Some(m) if m.failed.is_none() => {
                m.failed = Some(version);
                true
            }
            _ => false,
        }
    }

    pub fn merge(&mut self, other: &[Member]) -> bool {
        let mut changed = false;
        let mut prev: Option<u32> = None;
        for m in other {
            let mut m = m.clone();
            if let Some(a) = m.anchor {
                if self.position(a).is_none() {
                    m.anchor = prev;
                }
            }
            changed |= self.insert(m.clone());
            prev = Some(m.server.id);
        }
        changed
    }

    /// Apply a manager-issued server list: unknown entries are inserted
    /// after their list predecessor, and live members the list omits are
    /// failed unless they joined after the list was issued.
    pub fn apply_list(&mut self, list: &ServerList) -> bool {
        let mut changed = false;
        let mut prev: Option<u32> = None;
        for s in &list.servers {
            if self.position(s.id).is_none() {
                changed |= self.insert(Member {
                    server: s.clone(),
                    anchor: prev,
                    joined: list.version,
                    failed: None,
                });
            }
            prev = Some(s.id);
        }
        let listed: std::collections::HashSet<u32> = list.servers.iter().map(|s| s.id).collect();
        for m in self.list.iter_mut() {
            if m.is_live() && !listed.contains(&m.server.id) && m.joined <= list.version {
                m.failed = Some(list.version);
                changed = true;
            }
        }
        changed
    }

    /// First live member after `id` in ring order (wrapping), excluding `id`.
    pub fn live_successor_of(&self, id: u32) -> Option<&ServerId> {
        let pos = self.position(id)?;
        let n = self.list.len();
        (1..n)
            .map(|d| &self.list[(pos + d) % n])
            .find(|m| m.is_live())
            .map(|m| &m.server)
    }

    /// Neighbors of a live member, `None` if `id` is unknown or failed.
    pub fn view_of(&self, id: u32, k: usize) -> Option<(ServerId, Vec<ServerId>)> {
        let pos = self.position(id)?;
        if !self.list[pos].is_live() {
            return None;
        }
        let n = self.list.len();
        let me = self.list[pos].server.clone();
        let succ: Vec<ServerId> = (1..n)
            .map(|d| &self.list[(pos + d) % n])
            .filter(|m| m.is_live())
            .take(k)
            .map(|m| m.server.clone())
            .collect();
        let pred = (1..n)
            .map(|d| &self.list[(pos + n - d) % n])
            .find(|m| m.is_live())
            .map(|m| m.server.clone());
        if succ.is_empty() {
            Some((me.clone(), vec![me]))
        } else {
            Some((pred.unwrap(), succ))
        }
    }
}

/// A server's local picture of its neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingView {
    pub me: ServerId,
    pub predecessor: ServerId,
    pub successors: Vec<ServerId>,
    pub version: u64,
}

impl RingView {
    /// Successors other than this server.
    pub fn peers(&self) -> impl Iterator<Item = &ServerId> {
        self.successors.iter().filter(move |s| s.id != self.me.id)
    }
}

/// Views for every live member, as the manager hands them out at ring init.
pub fn init_views(servers: &[ServerId], k: usize) -> Vec<RingView> {
    let m = Membership::from_servers(servers, 1);
    servers
        .iter()
        .map(|s| {
            let (pred, succ) = m.view_of(s.id, k).unwrap();
            RingView {
                me: s.clone(),
                predecessor: pred,
                successors: succ,
                version: 1,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RingConfig {
    pub successors: usize,
    pub period: Duration,
    /// Consecutive unanswered pings before the successor is declared failed.
    pub miss_limit: u32,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            successors: 2,
            period: Duration::from_millis(500),
            miss_limit: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Probe {
    target: u32,
    misses: u32,
    acked: bool,
}

#[derive(Debug, Clone)]
struct PendingConfirm {
    subject: u32,
    client: Endpoint,
    seq: u64,
    deadline: Duration,
}

/// What a membership change did to this server's view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChange {
    pub old: Option<RingView>,
    pub new: Option<RingView>,
    pub failed: Vec<u32>,
}

/// The per-server stabilization driver.
#[derive(Debug)]
pub struct RingNode {
    cfg: RingConfig,
    addr: String,
    manager: Endpoint,
    members: Membership,
    view: Option<RingView>,
    version: u64,
    manager_version: u64,
    next_round: Duration,
    probe: Option<Probe>,
    streak: usize,
    isolated: bool,
    confirms: Vec<PendingConfirm>,
}

impl RingNode {
    pub fn new(cfg: RingConfig, addr: impl Into<String>, manager: Endpoint) -> Self {
        RingNode {
            cfg,
            addr: addr.into(),
            manager,
            members: Membership::new(),
            view: None,
            version: 0,
            manager_version: 0,
            next_round: Duration::ZERO,
            probe: None,
            streak: 0,
            isolated: false,
            confirms: Vec::new(),
        }
    }

    pub fn config(&self) -> &RingConfig {
        &self.cfg
    }

    pub fn view(&self) -> Option<&RingView> {
        self.view.as_ref()
    }

    pub fn me(&self) -> Option<&ServerId> {
        self.view.as_ref().map(|v| &v.me)
    }

    pub fn membership(&self) -> &Membership {
        &self.members
    }

    pub fn is_isolated(&self) -> bool {
        self.isolated
    }

    pub fn manager(&self) -> &Endpoint {
        &self.manager
    }

    pub fn next_wakeup(&self) -> Option<Duration> {
        self.view.as_ref()?;
        let c = self.confirms.iter().map(|c| c.deadline).min();
        Some(c.map_or(self.next_round, |c| c.min(self.next_round)))
    }

    fn my_id(&self) -> Option<u32> {
        self.members.by_addr(&self.addr).map(|m| m.server.id)
    }

    fn info(&self) -> Option<NeighborInfo> {
        let v = self.view.as_ref()?;
        Some(NeighborInfo {
            from: v.me.clone(),
            predecessor: v.predecessor.clone(),
            successors: v.successors.clone(),
            version: v.version,
            members: self.members.members().to_vec(),
        })
    }

    /// Recompute the view after the membership changed and push the new
    /// membership to both neighbors.
    fn refresh(&mut self, now: Duration, failed: Vec<u32>, out: &mut Outbox) -> Option<ViewChange> {
        for &f in &failed {
            self.answer_confirms(f, true, out);
        }
        let old = self.view.clone();
        let new = self.my_id().and_then(|id| {
            self.members
                .view_of(id, self.cfg.successors)
                .map(|(pred, succ)| RingView {
                    me: self.members.get(id).unwrap().server.clone(),
                    predecessor: pred,
                    successors: succ,
                    version: 0,
                })
        });
        let same = match (&old, &new) {
            (Some(a), Some(b)) => a.predecessor == b.predecessor && a.successors == b.successors,
            (None, None) => true,
            _ => false,
        };
        let new = new.map(|mut v| {
            self.version += if same { 0 } else { 1 };
            v.version = self.version;
            v
        });
        if old.is_none() && new.is_some() {
            self.next_round = now + self.cfg.period;
        }
        self.view = new.clone();
        if let Some(v) = &new {
            if !same {
                out.event(Event::ViewChanged {
                    version: v.version,
                    predecessor: v.predecessor.id,
                    successors: v.successors.iter().map(|s| s.id).collect(),
                });
            }
            // Flood the change outward; receivers forward only if they learned
            // something, so this terminates.
            let info = self.info().unwrap();
            let mut targets = vec![v.predecessor.clone()];
            targets.extend(v.successors.first().cloned());
            targets.sort();
            targets.dedup();
            for t in targets {
                if t.id != v.me.id {
                    out.send(t.endpoint(), 0, Message::NeighborQuery(info.clone()));
                }
            }
            if self.probe.as_ref().is_some_and(|p| !v.successors.iter().any(|s| s.id == p.target)) {
                self.probe = None;
            }
        }
        if same && failed.is_empty() {
            return None;
        }
        Some(ViewChange { old, new, failed })
    }

    fn newly_failed(before: &Membership, after: &Membership) -> Vec<u32> {
        after
            .members()
            .iter()
            .filter(|m| !m.is_live() && before.is_live(m.server.id))
            .map(|m| m.server.id)
            .collect()
    }

    pub fn on_ring_update(&mut self, now: Duration, list: &ServerList, out: &mut Outbox) -> Option<ViewChange> {
        if list.version < self.manager_version {
            return None;
        }
        self.manager_version = list.version;
        let before = self.members.clone();
        if !self.members.apply_list(list) && self.view.is_some() {
            return None;
        }
        let failed = Self::newly_failed(&before, &self.members);
        self.refresh(now, failed, out)
    }

    fn on_members(&mut self, now: Duration, members: &[Member], out: &mut Outbox) -> Option<ViewChange> {
        self.view.as_ref()?;
        let before = self.members.clone();
        if !self.members.merge(members) {
            return None;
        }
        let failed = Self::newly_failed(&before, &self.members);
        self.refresh(now, failed, out)
    }

    pub fn on_neighbor_query(&mut self, now: Duration, from: &Endpoint, info: &NeighborInfo, out: &mut Outbox) -> Option<ViewChange> {
        let change = self.on_members(now, &info.members, out);
        if let Some(mine) = self.info() {
            out.send(from.clone(), 0, Message::NeighborResp(mine));
        }
        change
    }

    pub fn on_neighbor_resp(&mut self, now: Duration, info: &NeighborInfo, out: &mut Outbox) -> Option<ViewChange> {
        self.on_members(now, &info.members, out)
    }

    pub fn on_ping(&self, from: &Endpoint, seq: u64, out: &mut Outbox) {
        if let Some(me) = self.me() {
            out.send(from.clone(), seq, Message::PingAck { from: me.id });
        }
    }

    pub fn on_ping_ack(&mut self, from_ep: &Endpoint, from: u32, out: &mut Outbox) {
        if let Some(p) = self.probe.as_mut() {
            if p.target == from && !p.acked {
                p.acked = true;
                self.streak = 0;
                if self.isolated {
                    self.isolated = false;
                    out.event(Event::Isolated { isolated: false });
                }
                if let Some(info) = self.info() {
                    out.send(from_ep.clone(), 0, Message::NeighborQuery(info));
                }
            }
        }
        self.answer_confirms(from, false, out);
    }

    fn answer_confirms(&mut self, subject: u32, confirmed: bool, out: &mut Outbox) {
        self.confirms.retain(|c| {
            if c.subject != subject {
                return true;
            }
            out.send(c.client.clone(), c.seq, Message::FailConfirmResp { subject, confirmed });
            false
        });
    }

    pub fn on_fail_confirm_req(&mut self, now: Duration, from: &Endpoint, seq: u64, subject: &ServerId, out: &mut Outbox) {
        if !self.members.is_live(subject.id) {
            out.send(from.clone(), seq, Message::FailConfirmResp { subject: subject.id, confirmed: true });
            return;
        }
        if self.me().is_some_and(|m| m.id == subject.id) {
            out.send(from.clone(), seq, Message::FailConfirmResp { subject: subject.id, confirmed: false });
            return;
        }
        let me = match self.me() {
            Some(m) => m.id,
            None => return,
        };
        out.send(subject.endpoint(), 0, Message::Ping { from: me });
        self.confirms.push(PendingConfirm {
            subject: subject.id,
            client: from.clone(),
            seq,
            deadline: now + self.cfg.period,
        });
    }

    /// Declare `subject` failed from local evidence and tell the manager.
    pub fn declare_failed(&mut self, now: Duration, subject: u32, out: &mut Outbox) -> Option<ViewChange> {
        self.version += 1;
        if !self.members.mark_failed(subject, self.version) {
            self.version -= 1;
            return None;
        }
        out.event(Event::FailureDetected { subject });
        if let (Some(me), Some(m)) = (self.me().cloned(), self.members.get(subject)) {
            out.send(
                self.manager.clone(),
                0,
                Message::FailReport {
                    subject: m.server.clone(),
                    reporter: Reporter::Server(me.id),
                    version: self.manager_version,
                },
            );
        }
        self.refresh(now, vec![subject], out)
    }

    pub fn tick(&mut self, now: Duration, out: &mut Outbox) -> Vec<ViewChange> {
        let mut changes = Vec::new();
        if self.view.is_none() {
            return changes;
        }
        let mut due = Vec::new();
        self.confirms.retain(|c| {
            if c.deadline <= now {
                due.push(c.clone());
                false
            } else {
                true
            }
        });
        for c in due {
            out.send(c.client.clone(), c.seq, Message::FailConfirmResp { subject: c.subject, confirmed: true });
            changes.extend(self.declare_failed(now, c.subject, out));
        }
        if now < self.next_round {
            return changes;
        }
        while self.next_round <= now {
            self.next_round += self.cfg.period;
        }
        if let Some(p) = self.probe.clone() {
            if !p.acked {
                let misses = p.misses + 1;
                if misses < self.cfg.miss_limit {
                    self.probe.as_mut().unwrap().misses = misses;
                    return changes;
                }
                self.probe = None;
                self.streak += 1;
                changes.extend(self.declare_failed(now, p.target, out));
                if self.streak >= self.cfg.successors && !self.isolated {
                    self.isolated = true;
                    out.event(Event::Isolated { isolated: true });
                    if let Some(me) = self.me().cloned() {
                        out.send(
                            self.manager.clone(),
                            0,
                            Message::FailReport {
                                subject: me.clone(),
                                reporter: Reporter::Server(me.id),
                                version: self.manager_version,
                            },
                        );
                    }
                }
            }
        }
        self.start_probe(out);
        changes
    }

    fn start_probe(&mut self, out: &mut Outbox) {
        let Some(v) = self.view.as_ref() else { return };
        let s0 = &v.successors[0];
        if s0.id == v.me.id {
            self.probe = None;
            self.streak = 0;
            if self.isolated {
                self.isolated = false;
                out.event(Event::Isolated { isolated: false });
            }
            return;
        }
        out.send(s0.endpoint(), 0, Message::Ping { from: v.me.id });
        self.probe = Some(Probe {
            target: s0.id,
            misses: 0,
            acked: false,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<ServerId> {
        (0..n).map(|i| ServerId::new(i, format!("s{i}"))).collect()
    }

    #[test]
    fn single_server_is_its_own_neighbor() {
        let v = init_views(&ids(1), 2);
        assert_eq!(v[0].predecessor.id, 0);
        assert_eq!(v[0].successors.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn four_ring_neighbors() {
        let v = init_views(&ids(4), 2);
        let a = &v[0];
        assert_eq!(a.successors.iter().map(|s| s.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(a.predecessor.id, 3);
    }

    #[test]
    fn two_ring_each_other() {
        let v = init_views(&ids(2), 2);
        assert_eq!(v[0].predecessor.id, 1);
        assert_eq!(v[0].successors.iter().map(|s| s.id).collect::<Vec<_>>(), vec![1]);
        assert_eq!(v[1].predecessor.id, 0);
    }

    #[test]
    fn failure_shifts_successors() {
        let mut m = Membership::from_servers(&ids(4), 1);
        assert!(m.mark_failed(1, 2));
        let (pred, succ) = m.view_of(0, 2).unwrap();
        assert_eq!(pred.id, 3);
        assert_eq!(succ.iter().map(|s| s.id).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(m.view_of(2, 2).unwrap().0.id, 0);
        assert!(!m.mark_failed(1, 3));
        assert!(!m.mark_failed(9, 3));
    }

    #[test]
    fn join_after_predecessor() {
        // A=0, C=1, D=2; B=3 joins after C.
        let mut m = Membership::from_servers(&[ServerId::new(0, "A"), ServerId::new(1, "C"), ServerId::new(2, "D")], 1);
        m.insert(Member {
            server: ServerId::new(3, "B"),
            anchor: Some(1),
            joined: 2,
            failed: None,
        });
        let order: Vec<&str> = m.members().iter().map(|x| x.server.addr.as_str()).collect();
        assert_eq!(order, vec!["A", "C", "B", "D"]);
    }

    #[test]
    fn merge_is_order_insensitive() {
        let base = Membership::from_servers(&ids(4), 1);
        let mut a = base.clone();
        let mut b = base.clone();
        let j1 = Member { server: ServerId::new(4, "s4"), anchor: Some(1), joined: 2, failed: None };
        let j2 = Member { server: ServerId::new(5, "s5"), anchor: Some(1), joined: 3, failed: None };
        a.insert(j1.clone());
        a.insert(j2.clone());
        a.mark_failed(2, 4);
        b.insert(j2);
        b.mark_failed(2, 4);
        b.insert(j1);
        assert_eq!(a, b);
        let mut c = base;
        c.merge(a.members());
        assert_eq!(c, a);
    }

    #[test]
    fn apply_list_marks_missing_failed() {
        let mut m = Membership::from_servers(&ids(4), 1);
        let list = ServerList { version: 2, servers: vec![ids(4)[0].clone(), ids(4)[2].clone(), ids(4)[3].clone()] };
        assert!(m.apply_list(&list));
        assert!(!m.is_live(1));
        assert!(!m.apply_list(&list));
    }
}
