use std::time::Duration;

use bytes::Bytes;
use burstbuf::sim::{queued_records, sequential_records, ClusterSpec};

fn pattern(tag: u8) -> impl FnMut(u64, &mut [u8]) + 'static {
    move |off, b| {
        for (i, x) in b.iter_mut().enumerate() {
            *x = ((off as usize + i) % 251) as u8 ^ tag;
        }
    }
}

fn expected(tag: u8, off: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    pattern(tag)(off, &mut v);
    v
}

const SECS: Duration = Duration::from_secs(30);

#[test]
fn later_epoch_shadows_earlier_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut sim = ClusterSpec::new(3, 1, dir.path()).start().unwrap();
    sim.drive_writes(vec![(0, sequential_records("ck", 1 << 20, 128 << 10, pattern(1)))], SECS)
        .unwrap();
    sim.with_client(0, |c, _, _| c.set_epoch(2)).unwrap();
    let patch = Bytes::from(expected(2, 300_000, 100_000));
    sim.drive_writes(vec![(0, queued_records([("ck".to_string(), 300_000, patch.clone())]))], SECS)
        .unwrap();

    let old = sim.read(0, "ck", 0, 1 << 20, 1, SECS).unwrap();
    assert!(old[..] == expected(1, 0, 1 << 20)[..]);
    let new = sim.read(0, "ck", 250_000, 200_000, u32::MAX, SECS).unwrap();
    let mut want = expected(1, 250_000, 200_000);
    want[50_000..150_000].copy_from_slice(&patch);
    assert!(new[..] == want[..]);

    sim.flush(0, 2, SECS).unwrap();
    let f = std::fs::read(dir.path().join("pfs/ck")).unwrap();
    let mut want = expected(1, 0, 1 << 20);
    want[300_000..400_000].copy_from_slice(&patch);
    assert!(f == want);
}

#[test]
fn spilled_records_read_back_and_flush() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ClusterSpec::new(2, 2, dir.path());
    spec.server.mem_capacity = 256 << 10;
    spec.server.spill_sync = false;
    let mut sim = spec.start().unwrap();
    let jobs = (0..2u32)
        .map(|r| (r, sequential_records(&format!("p{r}"), 2 << 20, 64 << 10, pattern(r as u8))))
        .collect();
    sim.drive_writes(jobs, SECS).unwrap();
    let spilled: u64 = sim.live_servers().iter().map(|s| s.store().spill_len()).sum();
    assert!(spilled > 0, "nothing reached the spill tier");
    for r in 0..2u32 {
        let got = sim.read(r, &format!("p{r}"), 0, 2 << 20, u32::MAX, SECS).unwrap();
        assert!(got[..] == expected(r as u8, 0, 2 << 20)[..], "rank {r}");
    }
    sim.flush(1, 1, SECS).unwrap();
    for r in 0..2u32 {
        let f = std::fs::read(dir.path().join(format!("pfs/p{r}"))).unwrap();
        assert!(f == expected(r as u8, 0, 2 << 20), "flushed p{r}");
    }
}

#[test]
fn reading_an_unknown_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut sim = ClusterSpec::new(2, 1, dir.path()).start().unwrap();
    assert!(sim.read(0, "missing", 0, 4096, u32::MAX, SECS).is_err());
}

#[test]
fn same_seed_same_history() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ClusterSpec::new(4, 2, dir.path());
        spec.seed = 42;
        let mut sim = spec.start().unwrap();
        let jobs = (0..2u32)
            .map(|r| (r, sequential_records("shared", 512 << 10, 32 << 10, pattern(r as u8))))
            .collect();
        sim.drive_writes(jobs, SECS).unwrap();
        (sim.now(), sim.events().count())
    };
    assert_eq!(run(), run());
}
