//! The sans-IO contract shared by every protocol participant.

use std::fmt;
use std::time::Duration;

use crate::events::Event;
use crate::wire::{Message, Packet};

/// Where a packet comes from or goes to.
///
/// Servers and the manager are addressed by their listen address. Clients
/// have no listener; a node reaches a client over the connection the client
/// opened.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Node(String),
    Client(u32),
}

impl Endpoint {
    pub fn node(addr: impl Into<String>) -> Self {
        Endpoint::Node(addr.into())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(a) => f.write_str(a),
            Endpoint::Client(r) => write!(f, "client#{r}"),
        }
    }
}

/// Side effects produced by one call into a node.
#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(Endpoint, Packet)>,
    pub events: Vec<Event>,
}

impl Outbox {
    pub fn new() -> Self {
        Outbox::default()
    }

    pub fn send(&mut self, to: Endpoint, seq: u64, msg: Message) {
        self.sends.push((to, Packet::new(seq, msg)));
    }

    pub fn event(&mut self, ev: Event) {
        self.events.push(ev);
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.events.is_empty()
    }
}

pub trait Node {
    /// Endpoint other nodes use to reach this one.
    fn endpoint(&self) -> Endpoint;

    fn start(&mut self, _now: Duration, _out: &mut Outbox) {}

    fn handle(&mut self, now: Duration, from: &Endpoint, pkt: Packet, out: &mut Outbox);

    /// Called at or after the time returned by `next_wakeup`.
    fn tick(&mut self, now: Duration, out: &mut Outbox);

    fn next_wakeup(&self) -> Option<Duration>;
}
