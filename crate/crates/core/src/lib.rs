//! A replicated burst buffer for checkpoint I/O.
//!
//! Clients push checkpoint fragments to a ring of buffer servers, which keep
//! them in a bounded memory log with an append-only spill file and replicate
//! them along their ring successors. A flush drains one epoch to a backing
//! directory with a two-phase shuffle, and restart reads are served straight
//! from the buffer.
//!
//! Every protocol participant (server, manager, client) is a sans-IO state
//! machine implementing [`node::Node`]. Two drivers run them: [`sim`] on a
//! simulated clock and network, and [`net`] on threads and TCP.

pub mod arena;
pub mod bench;
pub mod client;
pub mod events;
pub mod flush;
pub mod manager;
pub mod net;
pub mod node;
pub mod placement;
pub mod replication;
pub mod ring;
pub mod server;
pub mod sim;
pub mod store;
pub mod wire;

pub use client::{ClientConfig, ClientCore, ClientError};
pub use manager::{Manager, ManagerConfig};
pub use node::{Endpoint, Node, Outbox};
pub use placement::{KetamaRing, Placement, RecordKey};
pub use ring::{Member, Membership, RingView, ServerId};
pub use server::{ServerConfig, ServerNode};
pub use store::{Store, StoreError, WriteRecord};
pub use wire::{Message, MsgType, Packet};
