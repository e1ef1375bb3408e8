//! Record placement: Ketama consistent hashing or the isolated
//! one-server-per-client partition.

use std::fmt;
use std::str::FromStr;

use md5::{Digest, Md5};
use thiserror::Error;

use crate::ring::ServerId;

pub const DEFAULT_POINTS_PER_SERVER: usize = 160;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlacementError {
    #[error("cannot place records on an empty server list")]
    NoServers,
    #[error("duplicate server identity {0}")]
    DuplicateServer(String),
    #[error("points per server must be a positive multiple of 4, got {0}")]
    BadPointCount(usize),
    #[error("unknown placement strategy {0:?} (expected ketama or iso)")]
    UnknownStrategy(String),
}

/// Key of one write record, rendered as `<file_id>@<offset>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub file_id: String,
    pub offset: u64,
}

impl RecordKey {
    pub fn new(file_id: impl Into<String>, offset: u64) -> Self {
        RecordKey {
            file_id: file_id.into(),
            offset,
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.file_id, self.offset)
    }
}

fn md5(data: &[u8]) -> [u8; 16] {
    Md5::digest(data).into()
}

/// MD5 of the key string, first four digest bytes as a little-endian u32.
pub fn key_hash(key: &str) -> u32 {
    let d = md5(key.as_bytes());
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

#[derive(Debug, Clone)]
pub struct KetamaRing {
    points: Vec<(u32, usize)>,
    servers: Vec<ServerId>,
    points_per_server: usize,
}

impl KetamaRing {
    pub fn build(servers: &[ServerId]) -> Result<Self, PlacementError> {
        Self::with_points(servers, DEFAULT_POINTS_PER_SERVER)
    }

    pub fn with_points(servers: &[ServerId], points_per_server: usize) -> Result<Self, PlacementError> {
        if servers.is_empty() {
            return Err(PlacementError::NoServers);
        }
        if points_per_server == 0 || !points_per_server.is_multiple_of(4) {
            return Err(PlacementError::BadPointCount(points_per_server));
        }
        let mut seen = std::collections::HashSet::new();
        for s in servers {
            if !seen.insert(s.addr.as_str()) {
                return Err(PlacementError::DuplicateServer(s.addr.clone()));
            }
        }
        let mut points = Vec::with_capacity(servers.len() * points_per_server);
        for (idx, s) in servers.iter().enumerate() {
            for i in 0..points_per_server / 4 {
                let d = md5(format!("{}-{}", s.addr, i).as_bytes());
                for j in 0..4 {
                    let h = u32::from_le_bytes([d[4 * j], d[4 * j + 1], d[4 * j + 2], d[4 * j + 3]]);
                    points.push((h, idx));
                }
            }
        }
        // Equal hashes are ordered by address so every implementation agrees.
        points.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| servers[a.1].addr.cmp(&servers[b.1].addr)));
        Ok(KetamaRing {
            points,
            servers: servers.to_vec(),
            points_per_server,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_per_server(&self) -> usize {
        self.points_per_server
    }

    pub fn servers(&self) -> &[ServerId] {
        &self.servers
    }

    pub fn points(&self) -> impl Iterator<Item = (u32, &ServerId)> {
        self.points.iter().map(|&(h, i)| (h, &self.servers[i]))
    }

    /// Owner of the first point at or above `hash`, wrapping to the first point.
    pub fn locate_hash(&self, hash: u32) -> &ServerId {
        let i = self.points.partition_point(|&(h, _)| h < hash);
        let (_, idx) = self.points[if i == self.points.len() { 0 } else { i }];
        &self.servers[idx]
    }

    pub fn locate(&self, key: &RecordKey) -> &ServerId {
        self.locate_hash(key_hash(&key.to_string()))
    }
}

/// `servers[rank mod n]`.
pub fn locate_isolated(rank: u32, servers: &[ServerId]) -> Result<&ServerId, PlacementError> {
    if servers.is_empty() {
        return Err(PlacementError::NoServers);
    }
    Ok(&servers[rank as usize % servers.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    #[default]
    Ketama,
    Isolated,
}

impl FromStr for Strategy {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ketama" => Ok(Strategy::Ketama),
            "iso" | "isolated" => Ok(Strategy::Isolated),
            other => Err(PlacementError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ketama => "ketama",
            Strategy::Isolated => "iso",
        })
    }
}

/// A placement function bound to one server list.
#[derive(Debug, Clone)]
pub enum Placement {
    Ketama(KetamaRing),
    Isolated(Vec<ServerId>),
}

impl Placement {
    pub fn new(strategy: Strategy, servers: &[ServerId]) -> Result<Self, PlacementError> {
        match strategy {
            Strategy::Ketama => Ok(Placement::Ketama(KetamaRing::build(servers)?)),
            Strategy::Isolated => {
                if servers.is_empty() {
                    return Err(PlacementError::NoServers);
                }
                Ok(Placement::Isolated(servers.to_vec()))
            }
        }
    }

    pub fn locate(&self, rank: u32, key: &RecordKey) -> &ServerId {
        match self {
            Placement::Ketama(ring) => ring.locate(key),
            Placement::Isolated(list) => &list[rank as usize % list.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<ServerId> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| ServerId::new(i as u32, *n))
            .collect()
    }

    #[test]
    fn single_server_owns_everything() {
        let ring = KetamaRing::build(&ids(&["A"])).unwrap();
        for off in 0..100 {
            assert_eq!(ring.locate(&RecordKey::new("f", off)).addr, "A");
        }
        assert_eq!(ring.locate_hash(u32::MAX).addr, "A");
    }

    #[test]
    fn four_servers_make_640_points() {
        let ring = KetamaRing::build(&ids(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(ring.len(), 640);
        let pts: Vec<u32> = ring.points().map(|(h, _)| h).collect();
        assert!(pts.windows(2).all(|w| w[0] <= w[1]));
        for name in ["A", "B", "C", "D"] {
            assert_eq!(ring.points().filter(|(_, s)| s.addr == name).count(), 160);
        }
    }

    #[test]
    fn hash_above_max_point_wraps() {
        let ring = KetamaRing::build(&ids(&["A", "B", "C", "D"])).unwrap();
        let (max, _) = ring.points().last().unwrap();
        let (_, first) = ring.points().next().unwrap();
        let first = first.clone();
        if max < u32::MAX {
            assert_eq!(ring.locate_hash(max + 1), &first);
        }
        assert_eq!(ring.locate_hash(u32::MAX).addr, first.addr);
    }

    #[test]
    fn key_string_form() {
        assert_eq!(RecordKey::new("ckpt/file0", 0).to_string(), "ckpt/file0@0");
        assert_eq!(RecordKey::new("a/b", 1048576).to_string(), "a/b@1048576");
    }

    #[test]
    fn empty_and_duplicate_lists_are_rejected() {
        assert_eq!(KetamaRing::build(&[]).unwrap_err(), PlacementError::NoServers);
        assert!(matches!(
            KetamaRing::build(&ids(&["A", "A"])),
            Err(PlacementError::DuplicateServer(_))
        ));
        assert!(locate_isolated(0, &[]).is_err());
    }

    #[test]
    fn isolated_modulo() {
        let s = ids(&["A", "B", "C", "D"]);
        assert_eq!(locate_isolated(0, &s).unwrap().addr, "A");
        assert_eq!(locate_isolated(5, &s).unwrap().addr, "B");
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("ketama".parse::<Strategy>().unwrap(), Strategy::Ketama);
        assert_eq!("iso".parse::<Strategy>().unwrap(), Strategy::Isolated);
        assert!("rendezvous".parse::<Strategy>().is_err());
    }
}
