//! Two-phase flush: metadata exchange, domain plan, shuffle, and the I/O
//! phase; plus the lookup table that routes restart reads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Component, Path, PathBuf};

use bytes::{Bytes, BytesMut};
use thiserror::Error;

use crate::ring::ServerId;
use crate::store::WriteRecord;
use crate::wire::FileExtent;

#[derive(Debug, Error)]
pub enum FlushError {
    #[error("file {0} is not in the lookup table")]
    UnknownFile(String),
    #[error("range {offset}+{length} is outside {file} (size {size})")]
    OutOfRange {
        file: String,
        offset: u64,
        length: u64,
        size: u64,
    },
    #[error("file id {0:?} is not a safe relative path")]
    BadPath(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileMeta {
    pub file_id: String,
    pub global_size: u64,
    pub epoch: u32,
}

/// Merge per-server extents into one FileMeta per file that has data of
/// exactly `epoch` somewhere. Identical on every server given the same input.
pub fn merge_metadata<'a>(epoch: u32, per_server: impl IntoIterator<Item = &'a [FileExtent]>) -> BTreeMap<String, FileMeta> {
    let mut size: BTreeMap<String, u64> = BTreeMap::new();
    let mut newest: HashMap<String, u32> = HashMap::new();
    for list in per_server {
        for f in list {
            let s = size.entry(f.file_id.clone()).or_insert(0);
            *s = (*s).max(f.extent);
            let e = newest.entry(f.file_id.clone()).or_insert(0);
            *e = (*e).max(f.max_epoch);
        }
    }
    size.into_iter()
        .filter(|(f, _)| newest.get(f) == Some(&epoch))
        .map(|(f, s)| {
            (
                f.clone(),
                FileMeta {
                    file_id: f,
                    global_size: s,
                    epoch,
                },
            )
        })
        .collect()
}

/// Even split of `[0, global_size)` into `n` domains of `ceil(size / n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushPlan {
    pub file_id: String,
    pub global_size: u64,
    pub n: usize,
}

impl FlushPlan {
    pub fn new(file_id: impl Into<String>, global_size: u64, n: usize) -> Self {
        assert!(n > 0, "a flush plan needs at least one server");
        FlushPlan {
            file_id: file_id.into(),
            global_size,
            n,
        }
    }

    pub fn domain_size(&self) -> u64 {
        self.global_size.div_ceil(self.n as u64)
    }

    /// Byte range owned by ordering index `i`; may be empty.
    pub fn domain(&self, i: usize) -> (u64, u64) {
        let d = self.domain_size();
        let lo = (i as u64 * d).min(self.global_size);
        let hi = ((i as u64 + 1) * d).min(self.global_size);
        (lo, hi)
    }

    pub fn domains(&self) -> Vec<(u64, u64)> {
        (0..self.n).map(|i| self.domain(i)).collect()
    }

    pub fn owner_of(&self, offset: u64) -> usize {
        let d = self.domain_size().max(1);
        ((offset / d) as usize).min(self.n - 1)
    }

    /// Split `[offset, offset + len)` at domain boundaries.
    pub fn split(&self, offset: u64, len: u64) -> Vec<(usize, u64, u64)> {
        let end = (offset + len).min(self.global_size);
        let mut out = Vec::new();
        let mut at = offset;
        while at < end {
            let i = self.owner_of(at);
            let (_, hi) = self.domain(i);
            let stop = hi.min(end);
            out.push((i, at, stop - at));
            at = stop;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupEntry {
    pub global_size: u64,
    pub n: usize,
    pub ordering: Vec<ServerId>,
    pub epoch: u32,
}

/// Per-file layout of the last completed flush.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTable {
    files: HashMap<String, LookupEntry>,
}

impl LookupTable {
    pub fn new() -> Self {
        LookupTable::default()
    }

    pub fn record(&mut self, file_id: &str, entry: LookupEntry) {
        match self.files.get(file_id) {
            Some(cur) if cur.epoch > entry.epoch => {}
            _ => {
                self.files.insert(file_id.to_string(), entry);
            }
        }
    }

    pub fn get(&self, file_id: &str) -> Option<&LookupEntry> {
        self.files.get(file_id)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Owners of `[offset, offset + length)` with their sub-ranges.
pub fn lookup_owner(table: &LookupTable, file_id: &str, offset: u64, length: u64) -> Result<Vec<(ServerId, u64, u64)>, FlushError> {
    let e = table
        .get(file_id)
        .ok_or_else(|| FlushError::UnknownFile(file_id.to_string()))?;
    if offset.checked_add(length).is_none_or(|end| end > e.global_size) {
        return Err(FlushError::OutOfRange {
            file: file_id.to_string(),
            offset,
            length,
            size: e.global_size,
        });
    }
    let plan = FlushPlan::new(file_id, e.global_size, e.n);
    Ok(plan
        .split(offset, length)
        .into_iter()
        .map(|(i, off, len)| (e.ordering[i].clone(), off, len))
        .collect())
}

/// Paint records onto `[start, end)` in ascending priority and return the
/// visible, disjoint slices in offset order.
pub fn resolve(mut pieces: Vec<WriteRecord>, start: u64, end: u64) -> Vec<(u64, Bytes)> {
    pieces.sort_by_key(|p| p.priority());
    let mut map: BTreeMap<u64, (u64, Bytes)> = BTreeMap::new();
    for p in pieces {
        let Some(p) = p.clip(start, end) else { continue };
        let (ps, pe) = (p.offset, p.end());
        let hit: Vec<u64> = map
            .range(..pe)
            .rev()
            .take_while(|(_, (e, _))| *e > ps)
            .map(|(s, _)| *s)
            .collect();
        for s in hit {
            let (e, data) = map.remove(&s).unwrap();
            if s < ps {
                map.insert(s, (ps, data.slice(..(ps - s) as usize)));
            }
            if e > pe {
                map.insert(pe, (e, data.slice((pe - s) as usize..)));
            }
        }
        map.insert(ps, (pe, p.payload));
    }
    map.into_iter().map(|(s, (_, d))| (s, d)).collect()
}

/// Slices at least this long are passed through by `coalesce` as they are.
pub const PASS_THROUGH: usize = 64 << 10;

/// Contiguous runs of resolved slices, each at most `max_run` bytes unless a
/// single slice is larger. Large slices are not copied.
pub fn coalesce(slices: Vec<(u64, Bytes)>, max_run: usize) -> Vec<(u64, Bytes)> {
    let mut out: Vec<(u64, Bytes)> = Vec::new();
    let mut cur: Option<(u64, BytesMut)> = None;
    for (off, data) in slices {
        if data.len() >= PASS_THROUGH.min(max_run) {
            if let Some((s, buf)) = cur.take() {
                out.push((s, buf.freeze()));
            }
            out.push((off, data));
            continue;
        }
        match cur.as_mut() {
            Some((s, buf)) if *s + buf.len() as u64 == off && buf.len() + data.len() <= max_run => {
                buf.extend_from_slice(&data);
            }
            _ => {
                if let Some((s, buf)) = cur.take() {
                    out.push((s, buf.freeze()));
                }
                let mut b = BytesMut::with_capacity(max_run.min(PASS_THROUGH));
                b.extend_from_slice(&data);
                cur = Some((off, b));
            }
        }
    }
    if let Some((s, buf)) = cur {
        out.push((s, buf.freeze()));
    }
    out
}

/// `file_id` joined under `root`, refusing anything that could escape it.
pub fn target_path(root: &Path, file_id: &str) -> Result<PathBuf, FlushError> {
    let rel = Path::new(file_id);
    if file_id.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(FlushError::BadPath(file_id.to_string()));
    }
    Ok(root.join(rel))
}

/// Write one domain's resolved bytes. The file is grown to `global_size`
/// (never truncated), so unwritten ranges read back as zeros.
pub fn write_domain(root: &Path, file_id: &str, global_size: u64, runs: &[(u64, Bytes)]) -> Result<u64, FlushError> {
    let path = target_path(root, file_id)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)?;
    if f.metadata()?.len() < global_size {
        f.set_len(global_size)?;
    }
    let mut written = 0;
    for (off, data) in runs {
        f.write_all_at(data, *off)?;
        written += data.len() as u64;
    }
    Ok(written)
}

/// Shuffle bookkeeping for one flush on one server.
#[derive(Debug, Default)]
pub struct FlushJob {
    pub flush_id: u64,
    pub epoch: u32,
    /// Participants in ring order; known once FLUSH_CMD arrives.
    pub ordering: Option<Vec<ServerId>>,
    pub metas: HashMap<u32, Vec<FileExtent>>,
    pub plans: Option<BTreeMap<String, FlushPlan>>,
    pub shipped: bool,
    pub ends: HashMap<u32, u64>,
    pub received: HashMap<u32, u64>,
    pub finished: bool,
    pub failed: bool,
}

impl FlushJob {
    pub fn new(flush_id: u64) -> Self {
        FlushJob {
            flush_id,
            ..Default::default()
        }
    }

    pub fn participants(&self) -> HashSet<u32> {
        self.ordering
            .as_ref()
            .map(|o| o.iter().map(|s| s.id).collect())
            .unwrap_or_default()
    }

    pub fn has_all_metas(&self) -> bool {
        let p = self.participants();
        !p.is_empty() && p.iter().all(|id| self.metas.contains_key(id))
    }

    pub fn shuffle_complete(&self) -> bool {
        let p = self.participants();
        self.shipped
            && !p.is_empty()
            && p.iter().all(|id| match self.ends.get(id) {
                Some(&n) => self.received.get(id).copied().unwrap_or(0) == n,
                None => false,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(off: u64, fill: u8, len: usize, epoch: u32, seq: u64) -> WriteRecord {
        WriteRecord {
            file_id: "f".into(),
            offset: off,
            epoch,
            client: 0,
            seq,
            payload: Bytes::from(vec![fill; len]),
        }
    }

    #[test]
    fn even_split() {
        let m = 1 << 20;
        let p = FlushPlan::new("f", 4 * m, 4);
        assert_eq!(p.domains(), vec![(0, m), (m, 2 * m), (2 * m, 3 * m), (3 * m, 4 * m)]);
    }

    #[test]
    fn ceil_split_leaves_trailing_empty() {
        let p = FlushPlan::new("f", 5, 4);
        assert_eq!(p.domain_size(), 2);
        assert_eq!(p.domains(), vec![(0, 2), (2, 4), (4, 5), (5, 5)]);
    }

    #[test]
    fn boundary_split() {
        let m = 1 << 20;
        let p = FlushPlan::new("f", 4 * m, 4);
        assert_eq!(p.split(m / 2, m), vec![(0, m / 2, m / 2), (1, m, m / 2)]);
        assert_eq!(p.split(0, m), vec![(0, 0, m)]);
    }

    #[test]
    fn metadata_takes_max_extent() {
        let m = 1 << 20;
        let a = vec![FileExtent { file_id: "f".into(), extent: m, max_epoch: 1 }];
        let b = vec![FileExtent { file_id: "f".into(), extent: 4 * m, max_epoch: 1 }];
        let c = vec![FileExtent { file_id: "old".into(), extent: 9, max_epoch: 0 }];
        let meta = merge_metadata(1, [a.as_slice(), b.as_slice(), c.as_slice()]);
        assert_eq!(meta.len(), 1);
        assert_eq!(meta["f"].global_size, 4 * m);
    }

    #[test]
    fn lookup_single_and_spanning() {
        let mut t = LookupTable::new();
        let ord: Vec<ServerId> = (0..4).map(|i| ServerId::new(i, format!("s{i}"))).collect();
        t.record("f", LookupEntry { global_size: 400, n: 4, ordering: ord.clone(), epoch: 1 });
        let one = lookup_owner(&t, "f", 10, 20).unwrap();
        assert_eq!(one, vec![(ord[0].clone(), 10, 20)]);
        let two = lookup_owner(&t, "f", 90, 20).unwrap();
        assert_eq!(two, vec![(ord[0].clone(), 90, 10), (ord[1].clone(), 100, 10)]);
        assert!(matches!(lookup_owner(&t, "g", 0, 1), Err(FlushError::UnknownFile(_))));
        assert!(matches!(lookup_owner(&t, "f", 390, 20), Err(FlushError::OutOfRange { .. })));
    }

    #[test]
    fn resolve_prefers_later_epoch_then_seq() {
        let out = resolve(
            vec![rec(0, 1, 10, 2, 1), rec(5, 2, 10, 1, 9), rec(8, 3, 4, 2, 5)],
            0,
            20,
        );
        let mut buf = [0u8; 20];
        for (o, d) in &out {
            buf[*o as usize..*o as usize + d.len()].copy_from_slice(d);
        }
        assert_eq!(&buf[..8], &[1; 8]);
        assert_eq!(&buf[8..12], &[3; 4]);
        assert_eq!(&buf[12..15], &[2; 3]);
        assert_eq!(&buf[15..], &[0; 5]);
    }

    #[test]
    fn coalesce_joins_adjacent() {
        let runs = coalesce(
            vec![(0, Bytes::from_static(b"ab")), (2, Bytes::from_static(b"cd")), (10, Bytes::from_static(b"x"))],
            1024,
        );
        assert_eq!(runs, vec![(0, Bytes::from_static(b"abcd")), (10, Bytes::from_static(b"x"))]);
    }

    #[test]
    fn coalesce_passes_large_slices_through() {
        let big = Bytes::from(vec![7u8; PASS_THROUGH]);
        let runs = coalesce(
            vec![(0, Bytes::from_static(b"ab")), (2, big.clone()), (2 + big.len() as u64, Bytes::from_static(b"z"))],
            8 << 20,
        );
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[1].1.as_ptr(), big.as_ptr());
    }

    #[test]
    fn unsafe_paths_rejected() {
        let root = Path::new("/tmp/x");
        assert!(target_path(root, "../etc/passwd").is_err());
        assert!(target_path(root, "/abs").is_err());
        assert!(target_path(root, "").is_err());
        assert_eq!(target_path(root, "a/b").unwrap(), root.join("a/b"));
    }

    #[test]
    fn write_domain_zero_fills() {
        let d = tempfile::tempdir().unwrap();
        write_domain(d.path(), "out/f", 16, &[(4, Bytes::from_static(b"hi"))]).unwrap();
        let data = std::fs::read(d.path().join("out/f")).unwrap();
        assert_eq!(data.len(), 16);
        assert_eq!(&data[4..6], b"hi");
        assert!(data[..4].iter().all(|&b| b == 0));
    }
}
