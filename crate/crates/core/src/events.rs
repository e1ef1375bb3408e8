//! Structured events emitted by the state machines. The TCP driver prints
//! them as one JSON object per line; the simulator keeps them for assertions.

use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RingInit {
        version: u64,
        servers: Vec<u32>,
    },
    ViewChanged {
        version: u64,
        predecessor: u32,
        successors: Vec<u32>,
    },
    FailureDetected {
        subject: u32,
    },
    Isolated {
        isolated: bool,
    },
    MemberJoined {
        id: u32,
        predecessor: u32,
    },
    JoinRejected {
        addr: String,
        predecessor: u32,
    },
    Redirect {
        client: u32,
        seq: u64,
        target: u32,
        free_bytes: u64,
    },
    StoredLocally {
        client: u32,
        seq: u64,
        spilled: bool,
    },
    Promoted {
        failed: u32,
        records: usize,
    },
    Resync {
        target: u32,
        shipped: usize,
    },
    FlushStarted {
        flush_id: u64,
        epoch: u32,
        servers: usize,
    },
    FlushAborted {
        flush_id: u64,
        epoch: u32,
    },
    FlushFinished {
        flush_id: u64,
        epoch: u32,
        files: usize,
        bytes: u64,
    },
    ServerFailed {
        subject: u32,
        version: u64,
    },
    ConfirmRequested {
        subject: u32,
        via: u32,
    },
    ConfirmResult {
        subject: u32,
        confirmed: bool,
    },
    FailReported {
        subject: u32,
    },
    ServerListApplied {
        version: u64,
        servers: Vec<u32>,
    },
    Resent {
        seq: u64,
        target: u32,
    },
    Error {
        detail: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub at_ms: u64,
    pub node: String,
    #[serde(flatten)]
    pub event: Event,
}

impl EventRecord {
    pub fn new(at: Duration, node: impl Into<String>, event: Event) -> Self {
        EventRecord {
            at_ms: at.as_millis() as u64,
            node: node.into(),
            event,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_is_flat() {
        let rec = EventRecord::new(
            Duration::from_millis(1500),
            "s0",
            Event::FailureDetected { subject: 3 },
        );
        let v: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(v["event"], "failure_detected");
        assert_eq!(v["subject"], 3);
        assert_eq!(v["at_ms"], 1500);
        assert_eq!(v["node"], "s0");
    }
}
