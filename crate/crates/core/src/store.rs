//! Log-structured record store: a bounded memory log plus an append-only
//! spill file, both indexed by `(lane, file_id, offset, epoch)`.
//!
//! Spill record layout (big-endian):
//!
//! ```text
//! key_len u32 | payload_len u32 | epoch u32 | offset u64 | file_id_len u16
//! | client u32 | seq u64 | file_id | payload
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::ops::Bound;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::placement::RecordKey;
pub use crate::wire::Lane;

pub const RECORD_HEADER_LEN: u64 = 34;

/// One checkpoint fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRecord {
    pub file_id: String,
    pub offset: u64,
    pub epoch: u32,
    /// Rank of the writing client; `(client, seq)` identifies a write.
    pub client: u32,
    pub seq: u64,
    pub payload: Bytes,
}

impl WriteRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.file_id.clone(), self.offset)
    }

    pub fn len(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len()
    }

    /// Bytes the record occupies in either tier.
    pub fn footprint(&self) -> u64 {
        footprint(&self.file_id, self.payload.len())
    }

    /// Overlap resolution order: later epoch, then higher seq, then client.
    pub fn priority(&self) -> (u32, u64, u32) {
        (self.epoch, self.seq, self.client)
    }

    /// The part of the record inside `[start, end)`, if any.
    pub fn clip(&self, start: u64, end: u64) -> Option<WriteRecord> {
        let s = self.offset.max(start);
        let e = self.end().min(end);
        if s >= e {
            return None;
        }
        let lo = (s - self.offset) as usize;
        let hi = (e - self.offset) as usize;
        Some(WriteRecord {
            file_id: self.file_id.clone(),
            offset: s,
            epoch: self.epoch,
            client: self.client,
            seq: self.seq,
            payload: self.payload.slice(lo..hi),
        })
    }
}

pub fn footprint(file_id: &str, payload_len: usize) -> u64 {
    RECORD_HEADER_LEN + file_id.len() as u64 + payload_len as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Memory,
    Spill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageLocation {
    pub tier: Tier,
    /// Start of the record (header included) in its tier's log.
    pub log_offset: u64,
    pub length: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemBudget {
    pub capacity_bytes: u64,
    pub used_bytes: u64,
}

impl MemBudget {
    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0} not found")]
    NotFound(String),
    #[error("spill space exhausted: need {needed} bytes, {available} available")]
    Exhausted { needed: u64, available: u64 },
    #[error("corrupt spill record at {0}")]
    Corrupt(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IndexKey {
    pub lane: Lane,
    pub file_id: String,
    pub offset: u64,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    /// Stable handle for this index entry.
    pub id: u64,
    pub loc: StorageLocation,
    pub client: u32,
    pub seq: u64,
    /// Server that holds this record as primary.
    pub origin: u32,
}

/// A buffered segment as listed by a scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub offset: u64,
    pub length: u32,
    pub loc: StorageLocation,
    pub epoch: u32,
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Stored(StorageLocation, u64),
    /// Same `(client, seq)` already indexed.
    Duplicate(u64),
    /// A newer write for the same key is already indexed.
    Superseded(u64),
}

impl Appended {
    pub fn id(&self) -> u64 {
        match *self {
            Appended::Stored(_, id) | Appended::Duplicate(id) | Appended::Superseded(id) => id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub mem_capacity: u64,
    pub spill_path: PathBuf,
    /// Upper bound on the spill file; `None` means limited by the device.
    pub spill_capacity: Option<u64>,
    /// Push every spill append through to the device before it counts as
    /// stored. Without it spilled records sit in the page cache and still
    /// occupy RAM.
    pub spill_sync: bool,
}

#[derive(Debug)]
pub struct Store {
    cfg: StoreConfig,
    used: u64,
    mem_log_len: u64,
    mem: HashMap<u64, Bytes>,
    spill: Option<File>,
    spill_len: u64,
    index: BTreeMap<IndexKey, Entry>,
    by_id: HashMap<u64, IndexKey>,
    max_len: HashMap<(Lane, String), u64>,
    next_id: u64,
}

impl Store {
    pub fn new(cfg: StoreConfig) -> Self {
        Store {
            cfg,
            used: 0,
            mem_log_len: 0,
            mem: HashMap::new(),
            spill: None,
            spill_len: 0,
            index: BTreeMap::new(),
            by_id: HashMap::new(),
            max_len: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn spill_file_name(server_id: u32) -> String {
        format!("bb_spill_{server_id}.log")
    }

    /// Point the spill tier somewhere else. Only allowed before anything spilled.
    pub fn set_spill_path(&mut self, path: PathBuf) {
        if self.spill.is_none() {
            self.cfg.spill_path = path;
        }
    }

    pub fn spill_path(&self) -> &Path {
        &self.cfg.spill_path
    }

    pub fn spill_len(&self) -> u64 {
        self.spill_len
    }

    pub fn usage(&self) -> MemBudget {
        MemBudget {
            capacity_bytes: self.cfg.mem_capacity,
            used_bytes: self.used,
        }
    }

    pub fn fits_in_memory(&self, footprint: u64) -> bool {
        self.used + footprint <= self.cfg.mem_capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, key: &IndexKey) -> Option<&Entry> {
        self.index.get(key)
    }

    pub fn entry(&self, id: u64) -> Option<(&IndexKey, &Entry)> {
        let key = self.by_id.get(&id)?;
        self.index.get(key).map(|e| (key, e))
    }

    pub fn append(&mut self, lane: Lane, rec: &WriteRecord, origin: u32) -> Result<Appended, StoreError> {
        let key = IndexKey {
            lane,
            file_id: rec.file_id.clone(),
            offset: rec.offset,
            epoch: rec.epoch,
        };
        let mut replaced = None;
        if let Some(old) = self.index.get(&key) {
            if (old.client, old.seq) == (rec.client, rec.seq) {
                return Ok(Appended::Duplicate(old.id));
            }
            if (old.seq, old.client) > (rec.seq, rec.client) {
                return Ok(Appended::Superseded(old.id));
            }
            replaced = Some(*old);
        }
        let loc = self.write_record(rec)?;
        if let Some(old) = replaced {
            self.release(&old);
            self.by_id.remove(&old.id);
        }
        let id = self.next_id;
        self.next_id += 1;
        let ml = self.max_len.entry((lane, rec.file_id.clone())).or_insert(0);
        *ml = (*ml).max(rec.len());
        self.by_id.insert(id, key.clone());
        self.index.insert(
            key,
            Entry {
                id,
                loc,
                client: rec.client,
                seq: rec.seq,
                origin,
            },
        );
        Ok(Appended::Stored(loc, id))
    }

    fn write_record(&mut self, rec: &WriteRecord) -> Result<StorageLocation, StoreError> {
        let fp = rec.footprint();
        if self.fits_in_memory(fp) {
            let at = self.mem_log_len;
            self.mem.insert(at, rec.payload.clone());
            self.mem_log_len += fp;
            self.used += fp;
            assert!(self.used <= self.cfg.mem_capacity);
            return Ok(StorageLocation {
                tier: Tier::Memory,
                log_offset: at,
                length: rec.payload.len() as u32,
            });
        }
        if let Some(cap) = self.cfg.spill_capacity {
            if self.spill_len + fp > cap {
                return Err(StoreError::Exhausted {
                    needed: fp,
                    available: cap.saturating_sub(self.spill_len),
                });
            }
        }
        let mut buf = BytesMut::with_capacity(fp as usize);
        let key_len = rec.key().to_string().len() as u32;
        buf.put_u32(key_len);
        buf.put_u32(rec.payload.len() as u32);
        buf.put_u32(rec.epoch);
        buf.put_u64(rec.offset);
        buf.put_u16(rec.file_id.len() as u16);
        buf.put_u32(rec.client);
        buf.put_u64(rec.seq);
        buf.put_slice(rec.file_id.as_bytes());
        buf.put_slice(&rec.payload);
        let at = self.spill_len;
        let sync = self.cfg.spill_sync;
        let file = self.spill_file()?;
        if let Err(e) = file.write_all(&buf) {
            // Roll back a partial append so the log stays dense.
            let _ = file.set_len(at);
            if e.raw_os_error() == Some(28) {
                return Err(StoreError::Exhausted {
                    needed: fp,
                    available: 0,
                });
            }
            return Err(e.into());
        }
        if sync {
            file.sync_data()?;
        }
        self.spill_len += fp;
        Ok(StorageLocation {
            tier: Tier::Spill,
            log_offset: at,
            length: rec.payload.len() as u32,
        })
    }

    fn spill_file(&mut self) -> Result<&mut File, StoreError> {
        if self.spill.is_none() {
            if let Some(dir) = self.cfg.spill_path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let f = OpenOptions::new()
                .create(true)
                .read(true)
                .write(true)
                .truncate(true)
                .open(&self.cfg.spill_path)?;
            self.spill = Some(f);
        }
        Ok(self.spill.as_mut().unwrap())
    }

    fn release(&mut self, e: &Entry) {
        if e.loc.tier == Tier::Memory {
            if let Some(_payload) = self.mem.remove(&e.loc.log_offset) {
                let key = &self.by_id[&e.id];
                self.used -= footprint(&key.file_id, e.loc.length as usize);
            }
        }
    }

    /// Materialise an indexed record.
    pub fn read(&self, key: &IndexKey, e: &Entry) -> Result<WriteRecord, StoreError> {
        let payload = match e.loc.tier {
            Tier::Memory => self
                .mem
                .get(&e.loc.log_offset)
                .cloned()
                .ok_or(StoreError::Corrupt(e.loc.log_offset))?,
            Tier::Spill => {
                let file = self.spill.as_ref().ok_or(StoreError::Corrupt(e.loc.log_offset))?;
                let mut hdr = [0u8; RECORD_HEADER_LEN as usize];
                file.read_exact_at(&mut hdr, e.loc.log_offset)?;
                let plen = u32::from_be_bytes(hdr[4..8].try_into().unwrap());
                let flen = u16::from_be_bytes(hdr[20..22].try_into().unwrap()) as u64;
                if plen != e.loc.length || flen != key.file_id.len() as u64 {
                    return Err(StoreError::Corrupt(e.loc.log_offset));
                }
                let mut data = vec![0u8; plen as usize];
                file.read_exact_at(&mut data, e.loc.log_offset + RECORD_HEADER_LEN + flen)?;
                Bytes::from(data)
            }
        };
        Ok(WriteRecord {
            file_id: key.file_id.clone(),
            offset: key.offset,
            epoch: key.epoch,
            client: e.client,
            seq: e.seq,
            payload,
        })
    }

    pub fn read_id(&self, id: u64) -> Result<WriteRecord, StoreError> {
        let (k, e) = self.entry(id).ok_or_else(|| StoreError::NotFound(format!("#{id}")))?;
        self.read(k, e)
    }

    pub fn get(&self, lane: Lane, key: &RecordKey, epoch: u32) -> Result<WriteRecord, StoreError> {
        let ik = IndexKey {
            lane,
            file_id: key.file_id.clone(),
            offset: key.offset,
            epoch,
        };
        match self.index.get(&ik) {
            Some(e) => self.read(&ik, e),
            None => Err(StoreError::NotFound(format!("{key} epoch {epoch}"))),
        }
    }

    fn file_range(&self, lane: Lane, file_id: &str, from: u64, to: u64) -> impl Iterator<Item = (&IndexKey, &Entry)> {
        let lo = IndexKey {
            lane,
            file_id: file_id.to_string(),
            offset: from,
            epoch: 0,
        };
        let hi = IndexKey {
            lane,
            file_id: file_id.to_string(),
            offset: to,
            epoch: 0,
        };
        self.index.range((Bound::Included(lo), Bound::Excluded(hi)))
    }

    /// Segments of a file, newest epoch `<= max_epoch` per offset, sorted by
    /// offset.
    pub fn scan_file(&self, lane: Lane, file_id: &str, max_epoch: u32) -> Vec<Segment> {
        self.scan_filtered(lane, file_id, max_epoch, |_| true)
    }

    /// Like `scan_file`, restricted to entries held as primary for `origin`.
    pub fn scan_origin(&self, lane: Lane, file_id: &str, max_epoch: u32, origin: u32) -> Vec<Segment> {
        self.scan_filtered(lane, file_id, max_epoch, |e| e.origin == origin)
    }

    fn scan_filtered(&self, lane: Lane, file_id: &str, max_epoch: u32, keep: impl Fn(&Entry) -> bool) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for (k, e) in self.file_range(lane, file_id, 0, u64::MAX) {
            if k.epoch > max_epoch || !keep(e) {
                continue;
            }
            let seg = Segment {
                offset: k.offset,
                length: e.loc.length,
                loc: e.loc,
                epoch: k.epoch,
                id: e.id,
            };
            match out.last_mut() {
                // Epochs for one offset are visited in ascending order.
                Some(last) if last.offset == k.offset => *last = seg,
                _ => out.push(seg),
            }
        }
        out
    }

    /// Every entry of any epoch `<= max_epoch` overlapping `[start, end)`.
    pub fn overlapping(&self, lane: Lane, file_id: &str, start: u64, end: u64, max_epoch: u32) -> Vec<(&IndexKey, &Entry)> {
        let back = self
            .max_len
            .get(&(lane, file_id.to_string()))
            .copied()
            .unwrap_or(0);
        self.file_range(lane, file_id, start.saturating_sub(back), end)
            .filter(|(k, e)| k.epoch <= max_epoch && k.offset + e.loc.length as u64 > start)
            .collect()
    }

    pub fn files(&self, lane: Lane) -> Vec<String> {
        let mut v: Vec<String> = self
            .max_len
            .keys()
            .filter(|(l, _)| *l == lane)
            .map(|(_, f)| f.clone())
            .collect();
        v.sort();
        v
    }

    pub fn entries(&self) -> impl Iterator<Item = (&IndexKey, &Entry)> {
        self.index.iter()
    }

    /// Ids of ingest records whose primary is `origin`.
    pub fn ids_with_origin(&self, origin: u32) -> Vec<u64> {
        self.index
            .iter()
            .filter(|(k, e)| k.lane == Lane::Ingest && e.origin == origin)
            .map(|(_, e)| e.id)
            .collect()
    }

    pub fn set_origin(&mut self, id: u64, origin: u32) {
        if let Some(k) = self.by_id.get(&id) {
            if let Some(e) = self.index.get_mut(k) {
                e.origin = origin;
            }
        }
    }

    /// Move every ingest record held for `from` to `to`. Returns the count.
    pub fn retag_origin(&mut self, from: u32, to: u32) -> usize {
        let mut n = 0;
        for (k, e) in self.index.iter_mut() {
            if k.lane == Lane::Ingest && e.origin == from {
                e.origin = to;
                n += 1;
            }
        }
        n
    }

    /// Drop every entry of `lane` with epoch `<= max_epoch`. Returns the count.
    pub fn purge(&mut self, lane: Lane, max_epoch: u32) -> usize {
        let doomed: Vec<IndexKey> = self
            .index
            .keys()
            .filter(|k| k.lane == lane && k.epoch <= max_epoch)
            .cloned()
            .collect();
        for k in &doomed {
            let e = self.index[k];
            self.release(&e);
            self.by_id.remove(&e.id);
            self.index.remove(k);
        }
        doomed.len()
    }

    /// Recompute memory usage from the index; used by consistency checks.
    pub fn audit_used(&self) -> u64 {
        self.index
            .iter()
            .filter(|(_, e)| e.loc.tier == Tier::Memory)
            .map(|(k, e)| footprint(&k.file_id, e.loc.length as usize))
            .sum()
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if let Some(f) = self.spill.take() {
            drop(f);
            let _ = std::fs::remove_file(&self.cfg.spill_path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(dir: &Path, cap: u64) -> Store {
        Store::new(StoreConfig {
            mem_capacity: cap,
            spill_path: dir.join(Store::spill_file_name(0)),
            spill_capacity: None,
            spill_sync: false,
        })
    }

    fn rec(off: u64, epoch: u32, seq: u64, len: usize) -> WriteRecord {
        WriteRecord {
            file_id: "f".into(),
            offset: off,
            epoch,
            client: 0,
            seq,
            payload: Bytes::from(vec![(off % 251) as u8 ^ epoch as u8; len]),
        }
    }

    #[test]
    fn fresh_store_is_empty() {
        let d = tempfile::tempdir().unwrap();
        let s = store(d.path(), 1 << 20);
        assert_eq!(s.usage().used_bytes, 0);
        assert!(s.scan_file(Lane::Ingest, "f", u32::MAX).is_empty());
    }

    #[test]
    fn memory_append_accounts_footprint() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 4 << 20);
        let r = rec(0, 1, 1, 1 << 20);
        let a = s.append(Lane::Ingest, &r, 0).unwrap();
        assert!(matches!(a, Appended::Stored(StorageLocation { tier: Tier::Memory, .. }, _)));
        assert_eq!(s.usage().used_bytes, r.footprint());
        assert_eq!(s.get(Lane::Ingest, &r.key(), 1).unwrap(), r);
    }

    #[test]
    fn zero_capacity_spills_everything() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 0);
        let mut expect_len = 0;
        for i in 0..5 {
            let r = rec(i * 100, 1, i, 100);
            match s.append(Lane::Ingest, &r, 0).unwrap() {
                Appended::Stored(loc, _) => {
                    assert_eq!(loc.tier, Tier::Spill);
                    assert_eq!(loc.log_offset, expect_len);
                }
                other => panic!("{other:?}"),
            }
            expect_len += r.footprint();
            assert_eq!(std::fs::metadata(s.spill_path()).unwrap().len(), expect_len);
            assert_eq!(s.get(Lane::Ingest, &r.key(), 1).unwrap(), r);
        }
        assert_eq!(s.usage().used_bytes, 0);
    }

    #[test]
    fn duplicate_and_superseded() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 1 << 20);
        let r = rec(0, 1, 5, 10);
        let id = s.append(Lane::Ingest, &r, 0).unwrap().id();
        assert_eq!(s.append(Lane::Ingest, &r, 0).unwrap(), Appended::Duplicate(id));
        let older = rec(0, 1, 4, 10);
        assert_eq!(s.append(Lane::Ingest, &older, 0).unwrap(), Appended::Superseded(id));
        let mut newer = rec(0, 1, 6, 20);
        newer.payload = Bytes::from(vec![9u8; 20]);
        assert!(matches!(s.append(Lane::Ingest, &newer, 0).unwrap(), Appended::Stored(..)));
        assert_eq!(s.get(Lane::Ingest, &r.key(), 1).unwrap(), newer);
        assert_eq!(s.usage().used_bytes, newer.footprint());
        assert_eq!(s.audit_used(), s.usage().used_bytes);
    }

    #[test]
    fn scan_sorts_and_keeps_latest_epoch() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 64 << 20);
        let m = 1 << 20;
        for off in [2 * m, 0, m] {
            s.append(Lane::Ingest, &rec(off, 1, off, 16), 0).unwrap();
        }
        s.append(Lane::Ingest, &rec(m, 2, 99, 16), 0).unwrap();
        let segs = s.scan_file(Lane::Ingest, "f", u32::MAX);
        let offs: Vec<_> = segs.iter().map(|g| (g.offset, g.epoch)).collect();
        assert_eq!(offs, vec![(0, 1), (m, 2), (2 * m, 1)]);
        let e1: Vec<_> = s.scan_file(Lane::Ingest, "f", 1).iter().map(|g| g.epoch).collect();
        assert_eq!(e1, vec![1, 1, 1]);
    }

    #[test]
    fn overlapping_finds_records_starting_before_range() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 1 << 20);
        s.append(Lane::Ingest, &rec(0, 1, 1, 100), 0).unwrap();
        s.append(Lane::Ingest, &rec(100, 1, 2, 100), 0).unwrap();
        s.append(Lane::Ingest, &rec(300, 1, 3, 100), 0).unwrap();
        let hits: Vec<u64> = s
            .overlapping(Lane::Ingest, "f", 50, 150, u32::MAX)
            .iter()
            .map(|(k, _)| k.offset)
            .collect();
        assert_eq!(hits, vec![0, 100]);
    }

    #[test]
    fn exhausted_spill_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let mut s = Store::new(StoreConfig {
            mem_capacity: 0,
            spill_path: d.path().join("x.log"),
            spill_capacity: Some(100),
            spill_sync: false,
        });
        let err = s.append(Lane::Ingest, &rec(0, 1, 1, 200), 0).unwrap_err();
        assert!(matches!(err, StoreError::Exhausted { .. }));
    }

    #[test]
    fn purge_frees_memory() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 1 << 20);
        for e in 1..=3 {
            s.append(Lane::Ingest, &rec(0, e, e as u64, 64), 0).unwrap();
        }
        assert_eq!(s.purge(Lane::Ingest, 1), 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s.audit_used(), s.usage().used_bytes);
    }

    #[test]
    fn retag_moves_origin() {
        let d = tempfile::tempdir().unwrap();
        let mut s = store(d.path(), 1 << 20);
        s.append(Lane::Ingest, &rec(0, 1, 1, 8), 3).unwrap();
        s.append(Lane::Ingest, &rec(8, 1, 2, 8), 4).unwrap();
        assert_eq!(s.retag_origin(3, 4), 1);
        assert_eq!(s.ids_with_origin(4).len(), 2);
    }
}
