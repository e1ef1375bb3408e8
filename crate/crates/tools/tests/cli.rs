use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn spawn(bin: &str, args: &[&str]) -> Proc {
    Proc(Command::new(bin).args(args).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap())
}

fn cli(manager: &str, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bb-cli"))
        .arg("--manager-addr")
        .arg(manager)
        .args(args)
        .output()
        .unwrap()
}

fn cluster(dir: &Path, servers: usize) -> (String, Vec<Proc>) {
    let maddr = free_addr();
    let n = servers.to_string();
    let mut procs = vec![spawn(
        env!("CARGO_BIN_EXE_bb-manager"),
        &["--manager-addr", &maddr, "--expected-servers", &n, "--wait-ms", "5000"],
    )];
    sleep(Duration::from_millis(200));
    let spill = dir.join("spill");
    let pfs = dir.join("pfs");
    for _ in 0..servers {
        let addr = free_addr();
        procs.push(spawn(
            env!("CARGO_BIN_EXE_bb-server"),
            &[
                "--listen-addr", &addr,
                "--manager-addr", &maddr,
                "--mem-capacity", "32M",
                "--spill-dir", spill.to_str().unwrap(),
                "--pfs-dir", pfs.to_str().unwrap(),
                "--stabilize-ms", "200",
            ],
        ));
    }
    (maddr, procs)
}

/// Retry a put until the cluster has published its list.
fn put_when_ready(maddr: &str, args: &[&str]) {
    let t0 = Instant::now();
    loop {
        let o = cli(maddr, args);
        if o.status.success() {
            return;
        }
        assert!(t0.elapsed() < Duration::from_secs(30), "put never succeeded: {}", String::from_utf8_lossy(&o.stderr));
        sleep(Duration::from_millis(200));
    }
}

#[test]
fn put_get_flush_through_the_binaries() {
    let dir = tempfile::tempdir().unwrap();
    let (maddr, _procs) = cluster(dir.path(), 3);
    let data: Vec<u8> = (0..2_500_000u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
    let input = dir.path().join("in.bin");
    std::fs::write(&input, &data).unwrap();

    put_when_ready(&maddr, &["put", "ckpt/a", input.to_str().unwrap(), "--epoch", "1", "--chunk", "256K"]);

    let out = dir.path().join("back.bin");
    let o = cli(&maddr, &["get", "ckpt/a", "0", "2500000", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), data);

    // a slice through stdout
    let o = cli(&maddr, &["get", "ckpt/a", "1000", "5000"]);
    assert!(o.status.success());
    assert_eq!(o.stdout, &data[1000..6000]);

    let o = cli(&maddr, &["flush", "--epoch", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(dir.path().join("pfs/ckpt/a")).unwrap(), data);
}

#[test]
fn bench_against_a_running_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let (maddr, _procs) = cluster(dir.path(), 2);
    put_when_ready(&maddr, &["put", "warmup", "/dev/null"]);
    let csv = dir.path().join("r.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_bb-bench"))
        .args(["--manager-addr", &maddr, "--clients", "3", "--transfer-size", "64K", "--data-per-client", "2M"])
        .args(["--iterations", "2", "--inter-test-delay", "0", "--verify", "--placement", "iso"])
        .arg("--pfs-dir")
        .arg(dir.path().join("pfs"))
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("row,iteration,rank,bytes"));
    assert_eq!(rows.iter().filter(|r| r.starts_with("client,")).count(), 6);
    let aggregates: Vec<&str> = rows.iter().copied().filter(|r| r.starts_with("aggregate,")).collect();
    assert_eq!(aggregates.len(), 2);
    assert!(aggregates.iter().all(|r| r.contains(",true,")));
}

#[test]
fn bench_direct_backend_and_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let run = |iters: &str| {
        Command::new(env!("CARGO_BIN_EXE_bb-bench"))
            .args(["--backend", "direct", "--clients", "2", "--transfer-size", "4K", "--data-per-client", "64K"])
            .args(["--iterations", iters, "--inter-test-delay", "0", "--verify", "--mode", "sfp"])
            .arg("--pfs-dir")
            .arg(dir.path().join("pfs"))
            .arg("--out")
            .arg(&csv)
            .output()
            .unwrap()
    };
    let o = run("1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 + 1);
    let o = run("0");
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1);
}

#[test]
fn bad_arguments_are_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_bb-bench")).args(["--transfer-size", "3x"]).output().unwrap();
    assert!(!o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_bb-bench"))
        .args(["--backend", "direct", "--transfer-size", "3000", "--data-per-client", "4096", "--iterations", "1"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn server_joins_a_running_ring() {
    use std::io::{BufRead, BufReader};
    let dir = tempfile::tempdir().unwrap();
    let (maddr, _procs) = cluster(dir.path(), 1);
    put_when_ready(&maddr, &["put", "warm", "-", "--epoch", "1"]);
    let mut joiner = Proc(
        Command::new(env!("CARGO_BIN_EXE_bb-server"))
            .args(["--listen-addr", &free_addr(), "--manager-addr", &maddr, "--stabilize-ms", "200"])
            .args(["--spill-dir", dir.path().join("spill").to_str().unwrap()])
            .args(["--join-predecessor", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let out = joiner.0.stdout.take().unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(out).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let line = rx.recv_timeout(left).expect("joiner never reported a view with server 0");
        if line.contains("\"event\":\"view_changed\"") && line.contains("\"predecessor\":0") {
            break;
        }
    }
}
