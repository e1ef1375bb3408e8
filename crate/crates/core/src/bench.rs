//! IOR-style checkpoint workload: every client writes its share in
//! transfer-sized units, waits for acknowledgements, then the epoch is
//! flushed. Reports ingress bandwidth per client and per iteration.

use std::fmt;
use std::fs::OpenOptions;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientConfig, ClientError};
use crate::flush::target_path;
use crate::net::{null_sink, BbClient, EventSink, LocalCluster};
use crate::placement::Strategy;
use crate::server::ServerConfig;

pub const MIB: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client {rank}: {err}")]
    Client { rank: u32, err: ClientError },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad report row: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One shared file, strided.
    Sf,
    /// One file per process.
    Sfp,
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sf" => Ok(Mode::Sf),
            "sfp" => Ok(Mode::Sfp),
            _ => Err(BenchError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Bb,
    /// Write straight into the target directory.
    Direct,
}

impl FromStr for Backend {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bb" => Ok(Backend::Bb),
            "direct" => Ok(Backend::Direct),
            _ => Err(BenchError::Config(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mode: Mode,
    pub clients: u32,
    pub servers: usize,
    pub transfer_size: u64,
    pub data_per_client: u64,
    pub iterations: u32,
    pub inter_test_delay: Duration,
    pub backend: Backend,
    pub placement: Strategy,
    pub verify: bool,
    pub pfs_dir: PathBuf,
    pub spill_dir: PathBuf,
    pub mem_capacity: u64,
    pub replicas: usize,
    pub window: usize,
    /// Mixed into every payload so separate runs write different bytes.
    pub seed: u64,
    /// Use a running cluster instead of starting one in-process.
    pub manager_addr: Option<String>,
    pub file_name: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let tmp = std::env::temp_dir();
        BenchConfig {
            mode: Mode::Sf,
            clients: 4,
            servers: 4,
            transfer_size: MIB,
            data_per_client: 4 << 30,
            iterations: 10,
            inter_test_delay: Duration::from_secs(20),
            backend: Backend::Bb,
            placement: Strategy::Ketama,
            verify: false,
            pfs_dir: tmp.join("bb_pfs"),
            spill_dir: tmp.clone(),
            mem_capacity: crate::server::DEFAULT_MEM_CAPACITY,
            replicas: 2,
            window: 16,
            seed: 0,
            manager_addr: None,
            file_name: "ior/testfile".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.clients == 0 {
            return Err(BenchError::Config("need at least one client".into()));
        }
        if self.transfer_size == 0 || !self.data_per_client.is_multiple_of(self.transfer_size) {
            return Err(BenchError::Config(format!(
                "transfer size {} does not divide {}",
                self.transfer_size, self.data_per_client
            )));
        }
        if self.transfer_size > (crate::wire::DEFAULT_MAX_PAYLOAD as u64) - 4096 {
            return Err(BenchError::Config("transfer size exceeds the frame limit".into()));
        }
        if self.backend == Backend::Bb && self.manager_addr.is_none() && self.servers == 0 {
            return Err(BenchError::Config("need at least one server".into()));
        }
        Ok(())
    }

    pub fn blocks_per_client(&self) -> u64 {
        self.data_per_client / self.transfer_size
    }

    /// File and offset of block `i` written by `rank`.
    pub fn location(&self, rank: u32, i: u64) -> (String, u64) {
        let ts = self.transfer_size;
        match self.mode {
            Mode::Sf => (self.file_name.clone(), rank as u64 * ts + i * self.clients as u64 * ts),
            Mode::Sfp => (format!("{}.{rank:05}", self.file_name), i * ts),
        }
    }

    pub fn files(&self) -> Vec<String> {
        match self.mode {
            Mode::Sf => vec![self.file_name.clone()],
            Mode::Sfp => (0..self.clients).map(|r| format!("{}.{r:05}", self.file_name)).collect(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.clients as u64 * self.data_per_client * self.iterations as u64
    }
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generates block contents for one client and iteration. A random base
/// block is stamped with the block index every 4 KiB, so every block is
/// distinct but producing one costs a copy rather than an RNG pass.
pub struct BlockGen {
    base: Vec<u8>,
}

pub const STAMP_STRIDE: usize = 4096;

impl BlockGen {
    pub fn new(seed: u64, iteration: u32, rank: u32, size: usize) -> Self {
        let mut base = vec![0u8; size];
        let s = mix(seed ^ mix(((iteration as u64) << 32) | rank as u64));
        SmallRng::seed_from_u64(s).fill_bytes(&mut base);
        BlockGen { base }
    }

    pub fn fill(&self, index: u64, buf: &mut [u8]) {
        buf.copy_from_slice(&self.base);
        let tag = mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15));
        for (page, chunk) in buf.chunks_mut(STAMP_STRIDE).enumerate() {
            let v = (tag ^ page as u64).to_le_bytes();
            let n = chunk.len().min(8);
            chunk[..n].copy_from_slice(&v[..n]);
        }
    }

    pub fn block(&self, index: u64) -> Vec<u8> {
        let mut v = vec![0u8; self.base.len()];
        self.fill(index, &mut v);
        v
    }
}

/// Deterministic contents of one block.
pub fn fill_block(seed: u64, iteration: u32, rank: u32, index: u64, buf: &mut [u8]) {
    BlockGen::new(seed, iteration, rank, buf.len()).fill(index, buf);
}

/// SHA-256 of each file as it should look after `iteration`, assembled in
/// file order without touching the disk.
pub fn oracle_digests(cfg: &BenchConfig, iteration: u32) -> Vec<(String, String)> {
    let ts = cfg.transfer_size as usize;
    let mut buf = vec![0u8; ts];
    let blocks = cfg.blocks_per_client();
    match cfg.mode {
        Mode::Sf => {
            let mut h = Sha256::new();
            let gens: Vec<_> = (0..cfg.clients).map(|r| BlockGen::new(cfg.seed, iteration, r, ts)).collect();
            for i in 0..blocks {
                for g in &gens {
                    g.fill(i, &mut buf);
                    h.update(&buf);
                }
            }
            vec![(cfg.file_name.clone(), hex::encode(h.finalize()))]
        }
        Mode::Sfp => (0..cfg.clients)
            .map(|rank| {
                let mut h = Sha256::new();
                let g = BlockGen::new(cfg.seed, iteration, rank, ts);
                for i in 0..blocks {
                    g.fill(i, &mut buf);
                    h.update(&buf);
                }
                (format!("{}.{rank:05}", cfg.file_name), hex::encode(h.finalize()))
            })
            .collect(),
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSample {
    pub iteration: u32,
    pub rank: u32,
    pub bytes: u64,
    pub seconds: f64,
}

impl ClientSample {
    pub fn bandwidth(&self) -> f64 {
        if self.seconds > 0.0 {
            self.bytes as f64 / self.seconds
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u32,
    pub clients: Vec<ClientSample>,
    pub flush_seconds: f64,
    pub verified: Option<bool>,
    /// Digest of the flushed files, `;`-joined in file order.
    pub digest: String,
}

impl IterationReport {
    pub fn bytes(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes).sum()
    }

    pub fn max_seconds(&self) -> f64 {
        self.clients.iter().map(|c| c.seconds).fold(0.0, f64::max)
    }

    /// Total bytes over the slowest client's time.
    pub fn aggregate_bandwidth(&self) -> f64 {
        let t = self.max_seconds();
        if t > 0.0 {
            self.bytes() as f64 / t
        } else {
            0.0
        }
    }

    pub fn min_bandwidth(&self) -> f64 {
        self.clients.iter().map(|c| c.bandwidth()).fold(f64::INFINITY, f64::min)
    }

    pub fn max_bandwidth(&self) -> f64 {
        self.clients.iter().map(|c| c.bandwidth()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub iterations: Vec<IterationReport>,
    pub error: Option<String>,
}

impl BenchReport {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.iterations.iter().any(|i| i.verified == Some(false))
    }

    pub fn total_bytes(&self) -> u64 {
        self.iterations.iter().map(|i| i.bytes()).sum()
    }

    pub fn mean_bandwidth(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().map(|i| i.aggregate_bandwidth()).sum::<f64>() / self.iterations.len() as f64
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for it in &self.iterations {
            s.push_str(&format!(
                "iter {:>3}  {:>10.1} MiB/s  (client min {:.1}, max {:.1})  flush {:.3}s  verify {}\n",
                it.iteration,
                it.aggregate_bandwidth() / MIB as f64,
                it.min_bandwidth() / MIB as f64,
                it.max_bandwidth() / MIB as f64,
                it.flush_seconds,
                match it.verified {
                    Some(true) => "ok",
                    Some(false) => "MISMATCH",
                    None => "-",
                }
            ));
        }
        s.push_str(&format!(
            "total {} bytes, mean {:.1} MiB/s{}\n",
            self.total_bytes(),
            self.mean_bandwidth() / MIB as f64,
            match &self.error {
                Some(e) => format!(", FAILED: {e}"),
                None => String::new(),
            }
        ));
        s
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "row",
    "iteration",
    "rank",
    "bytes",
    "seconds",
    "bandwidth",
    "min_bandwidth",
    "max_bandwidth",
    "flush_seconds",
    "verified",
    "digest",
];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    row: String,
    iteration: u32,
    rank: Option<u32>,
    bytes: u64,
    seconds: f64,
    bandwidth: f64,
    min_bandwidth: Option<f64>,
    max_bandwidth: Option<f64>,
    flush_seconds: Option<f64>,
    verified: Option<bool>,
    digest: Option<String>,
}

/// One `client` row per (iteration, rank), then one `aggregate` row per
/// iteration.
pub fn write_csv(report: &BenchReport, w: impl std::io::Write) -> Result<(), BenchError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(CSV_COLUMNS)?;
    for it in &report.iterations {
        for c in &it.clients {
            wtr.serialize(CsvRow {
                row: "client".into(),
                iteration: c.iteration,
                rank: Some(c.rank),
                bytes: c.bytes,
                seconds: c.seconds,
                bandwidth: c.bandwidth(),
                min_bandwidth: None,
                max_bandwidth: None,
                flush_seconds: None,
                verified: None,
                digest: None,
            })?;
        }
    }
    for it in &report.iterations {
        wtr.serialize(CsvRow {
            row: "aggregate".into(),
            iteration: it.iteration,
            rank: None,
            bytes: it.bytes(),
            seconds: it.max_seconds(),
            bandwidth: it.aggregate_bandwidth(),
            min_bandwidth: Some(it.min_bandwidth()),
            max_bandwidth: Some(it.max_bandwidth()),
            flush_seconds: Some(it.flush_seconds),
            verified: it.verified,
            digest: Some(it.digest.clone()),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn emit_report(report: &BenchReport, path: &Path) -> Result<(), BenchError> {
    let f = std::fs::File::create(path)?;
    write_csv(report, std::io::BufWriter::new(f))
}

pub fn read_csv(r: impl std::io::Read) -> Result<BenchReport, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut report = BenchReport::default();
    let mut clients: Vec<ClientSample> = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row?;
        match row.row.as_str() {
            "client" => clients.push(ClientSample {
                iteration: row.iteration,
                rank: row.rank.ok_or_else(|| BenchError::Report("client row without rank".into()))?,
                bytes: row.bytes,
                seconds: row.seconds,
            }),
            "aggregate" => report.iterations.push(IterationReport {
                iteration: row.iteration,
                clients: clients.iter().filter(|c| c.iteration == row.iteration).cloned().collect(),
                flush_seconds: row.flush_seconds.unwrap_or(0.0),
                verified: row.verified,
                digest: row.digest.unwrap_or_default(),
            }),
            other => return Err(BenchError::Report(format!("unknown row kind {other:?}"))),
        }
    }
    Ok(report)
}

fn verify(cfg: &BenchConfig, iteration: u32) -> Result<(bool, String), BenchError> {
    let mut ok = true;
    let mut digests = Vec::new();
    for (file, want) in oracle_digests(cfg, iteration) {
        let path = target_path(&cfg.pfs_dir, &file).map_err(|e| BenchError::Config(e.to_string()))?;
        let got = sha256_file(&path)?;
        ok &= got == want;
        digests.push(got);
    }
    Ok((ok, digests.join(";")))
}

fn digest_only(cfg: &BenchConfig) -> Result<String, BenchError> {
    let mut digests = Vec::new();
    for file in cfg.files() {
        let path = target_path(&cfg.pfs_dir, &file).map_err(|e| BenchError::Config(e.to_string()))?;
        digests.push(sha256_file(&path)?);
    }
    Ok(digests.join(";"))
}

fn direct_client(cfg: &BenchConfig, iteration: u32, rank: u32, barrier: &Barrier) -> Result<ClientSample, BenchError> {
    let mut buf = vec![0u8; cfg.transfer_size as usize];
    let mut files = std::collections::HashMap::new();
    let gen = BlockGen::new(cfg.seed, iteration, rank, buf.len());
    barrier.wait();
    let t0 = Instant::now();
    for i in 0..cfg.blocks_per_client() {
        let (file, off) = cfg.location(rank, i);
        gen.fill(i, &mut buf);
        if !files.contains_key(&file) {
            let path = target_path(&cfg.pfs_dir, &file).map_err(|e| BenchError::Config(e.to_string()))?;
            if let Some(p) = path.parent() {
                std::fs::create_dir_all(p)?;
            }
            let f = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
            files.insert(file.clone(), f);
        }
        files[&file].write_all_at(&buf, off)?;
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(ClientSample {
        iteration,
        rank,
        bytes: cfg.data_per_client,
        seconds,
    })
}

fn bb_client(cfg: &BenchConfig, client: &BbClient, iteration: u32, barrier: &Barrier) -> Result<ClientSample, BenchError> {
    let rank = client.rank();
    let err = |err| BenchError::Client { rank, err };
    client.set_epoch(iteration + 1);
    let ts = cfg.transfer_size as usize;
    let gen = BlockGen::new(cfg.seed, iteration, rank, ts);
    let mut arena = crate::arena::Arena::default();
    barrier.wait();
    let t0 = Instant::now();
    for i in 0..cfg.blocks_per_client() {
        let (file, off) = cfg.location(rank, i);
        let block = arena.fill(ts, |b| {
            gen.fill(i, b);
            Ok(())
        })?;
        client.write(&file, off, block).map_err(err)?;
    }
    client.wait().map_err(err)?;
    Ok(ClientSample {
        iteration,
        rank,
        bytes: cfg.data_per_client,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn run_clients<T: Send>(
    n: u32,
    f: impl Fn(u32, &Barrier) -> Result<T, BenchError> + Sync,
) -> Result<Vec<T>, BenchError> {
    let barrier = Barrier::new(n as usize);
    thread::scope(|s| {
        let handles: Vec<_> = (0..n).map(|r| {
            let f = &f;
            let b = &barrier;
            s.spawn(move || f(r, b))
        }).collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    })
}

/// Run the whole benchmark. Iteration `k` writes checkpoint epoch `k + 1`.
pub fn run_workload(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    run_workload_with(cfg, null_sink())
}

pub fn run_workload_with(cfg: &BenchConfig, sink: EventSink) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.pfs_dir)?;
    let mut report = BenchReport::default();
    let mut cluster = None;
    let mut sessions = Vec::new();
    if cfg.backend == Backend::Bb {
        let manager = match &cfg.manager_addr {
            Some(a) => a.clone(),
            None => {
                std::fs::create_dir_all(&cfg.spill_dir)?;
                let mut t = ServerConfig::new("", "");
                t.mem_capacity = cfg.mem_capacity;
                t.spill_dir = cfg.spill_dir.clone();
                t.pfs_dir = cfg.pfs_dir.clone();
                t.replicas = cfg.replicas;
                let c = LocalCluster::start(cfg.servers, &t, sink.clone())?;
                let a = c.manager_addr.clone();
                cluster = Some(c);
                a
            }
        };
        for rank in 0..cfg.clients {
            let mut c = ClientConfig::new(rank, &manager);
            c.placement = cfg.placement;
            c.window = cfg.window;
            sessions.push(Arc::new(BbClient::open_with(c, sink.clone()).map_err(|err| BenchError::Client { rank, err })?));
        }
    }
    for iteration in 0..cfg.iterations {
        let samples = match cfg.backend {
            Backend::Direct => run_clients(cfg.clients, |r, b| direct_client(cfg, iteration, r, b)),
            Backend::Bb => run_clients(cfg.clients, |r, b| bb_client(cfg, &sessions[r as usize], iteration, b)),
        };
        let clients = match samples {
            Ok(s) => s,
            Err(e) => {
                report.error = Some(e.to_string());
                break;
            }
        };
        let t0 = Instant::now();
        if cfg.backend == Backend::Bb {
            if let Err(err) = sessions[0].flush(iteration + 1) {
                report.error = Some(BenchError::Client { rank: 0, err }.to_string());
                break;
            }
        }
        let flush_seconds = t0.elapsed().as_secs_f64();
        let (verified, digest) = if cfg.verify {
            let (ok, d) = verify(cfg, iteration)?;
            (Some(ok), d)
        } else {
            (None, digest_only(cfg).unwrap_or_default())
        };
        report.iterations.push(IterationReport {
            iteration,
            clients,
            flush_seconds,
            verified,
            digest,
        });
        if iteration + 1 < cfg.iterations {
            thread::sleep(cfg.inter_test_delay);
        }
    }
    for s in sessions {
        if let Ok(s) = Arc::try_unwrap(s) {
            s.close();
        }
    }
    drop(cluster);
    Ok(report)
}
