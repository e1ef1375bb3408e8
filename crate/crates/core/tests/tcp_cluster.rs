use std::time::Duration;

use bytes::Bytes;
use burstbuf::net::{null_sink, BbClient, LocalCluster};
use burstbuf::placement::Strategy;
use burstbuf::server::ServerConfig;

fn block(rank: u32, i: u64, len: usize) -> Bytes {
    Bytes::from((0..len).map(|j| (j as u64 * 7 + i * 13 + rank as u64 * 101) as u8).collect::<Vec<_>>())
}

fn template(root: &std::path::Path) -> ServerConfig {
    let mut cfg = ServerConfig::new("", "");
    cfg.spill_dir = root.join("spill");
    cfg.pfs_dir = root.join("pfs");
    cfg.spill_sync = false;
    cfg.stabilize = Duration::from_millis(100);
    cfg
}

#[test]
fn interleaved_writers_flush_one_file() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(3, &template(dir.path()), null_sink()).unwrap();
    let clients: Vec<BbClient> = (0..3)
        .map(|r| BbClient::open(&cluster.manager_addr, r, Strategy::Ketama).unwrap())
        .collect();
    let bs = 96 << 10;
    for i in 0..8u64 {
        for (r, c) in clients.iter().enumerate() {
            let off = (i * 3 + r as u64) * bs as u64;
            c.write("shared", off, block(r as u32, i, bs)).unwrap();
        }
    }
    for c in &clients {
        c.wait().unwrap();
    }
    let whole = clients[1].read("shared", 0, 24 * bs as u64).unwrap();
    clients[2].flush(1).unwrap();
    let flushed = std::fs::read(dir.path().join("pfs/shared")).unwrap();
    assert_eq!(flushed.len(), 24 * bs);
    for i in 0..8u64 {
        for r in 0..3u32 {
            let off = ((i * 3 + r as u64) * bs as u64) as usize;
            let want = block(r, i, bs);
            assert!(whole[off..off + bs] == want[..], "read block {i} rank {r}");
            assert!(flushed[off..off + bs] == want[..], "flushed block {i} rank {r}");
        }
    }
    for c in clients {
        c.close();
    }
}

#[test]
fn replicas_survive_a_killed_server() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = template(dir.path());
    cfg.replicas = 2;
    let mut cluster = LocalCluster::start(4, &cfg, null_sink()).unwrap();
    let c = BbClient::open(&cluster.manager_addr, 0, Strategy::Ketama).unwrap();
    let bs = 64 << 10;
    for i in 0..32u64 {
        c.write("ck", i * bs as u64, block(0, i, bs)).unwrap();
    }
    c.wait().unwrap();
    cluster.kill(1);
    let got = c.read("ck", 0, 32 * bs as u64).unwrap();
    for i in 0..32u64 {
        let off = i as usize * bs;
        assert!(got[off..off + bs] == block(0, i, bs)[..], "block {i}");
    }
    c.close();
}

#[test]
fn isolated_placement_keeps_a_rank_on_one_server() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = template(dir.path());
    cfg.replicas = 0;
    let cluster = LocalCluster::start(3, &cfg, null_sink()).unwrap();
    let c = BbClient::open(&cluster.manager_addr, 5, Strategy::Isolated).unwrap();
    for i in 0..16u64 {
        c.write("iso", i * 4096, block(5, i, 4096)).unwrap();
    }
    c.wait().unwrap();
    let holders = (0..3)
        .filter(|&i| cluster.server(i).unwrap().inspect(|n| !n.store().is_empty()))
        .count();
    assert_eq!(holders, 1);
    c.close();
}
