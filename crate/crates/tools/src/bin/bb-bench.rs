use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use burstbuf::bench::{emit_report, run_workload_with, Backend, BenchConfig, Mode};
use burstbuf::net::{null_sink, stdout_sink};
use burstbuf::placement::Strategy;
use clap::Parser;

/// Checkpoint ingest benchmark: every client writes its share in
/// transfer-sized blocks, then the epoch is flushed.
#[derive(Parser)]
#[command(name = "bb-bench")]
struct Args {
    /// `sf` for one shared strided file, `sfp` for a file per client.
    #[arg(long, default_value = "sf")]
    mode: Mode,
    #[arg(long, default_value_t = 4)]
    clients: u32,
    #[arg(long, default_value_t = 4)]
    servers: usize,
    #[arg(long, default_value = "1M", value_parser = bbtools::parse_size)]
    transfer_size: u64,
    #[arg(long, default_value = "4G", value_parser = bbtools::parse_size)]
    data_per_client: u64,
    #[arg(long, default_value_t = 10)]
    iterations: u32,
    /// Pause between iterations, in seconds.
    #[arg(long, default_value = "20", value_parser = bbtools::parse_secs)]
    inter_test_delay: Duration,
    #[arg(long, default_value = "bb")]
    backend: Backend,
    #[arg(long, default_value = "ketama")]
    placement: Strategy,
    /// Compare every flushed file with the expected contents.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Use an already running cluster instead of starting one in-process.
    #[arg(long)]
    manager_addr: Option<String>,
    #[arg(long, value_parser = bbtools::parse_size)]
    mem_capacity: Option<u64>,
    #[arg(long)]
    spill_dir: Option<PathBuf>,
    #[arg(long)]
    pfs_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print node events as JSON lines.
    #[arg(long)]
    events: bool,
}

fn main() -> ExitCode {
    let a = Args::parse();
    let mut cfg = BenchConfig {
        mode: a.mode,
        clients: a.clients,
        servers: a.servers,
        transfer_size: a.transfer_size,
        data_per_client: a.data_per_client,
        iterations: a.iterations,
        inter_test_delay: a.inter_test_delay,
        backend: a.backend,
        placement: a.placement,
        verify: a.verify,
        replicas: a.replicas,
        seed: a.seed,
        manager_addr: a.manager_addr,
        ..BenchConfig::default()
    };
    if let Some(m) = a.mem_capacity {
        cfg.mem_capacity = m;
    }
    if let Some(d) = a.spill_dir {
        cfg.spill_dir = d;
    }
    if let Some(d) = a.pfs_dir {
        cfg.pfs_dir = d;
    }
    let sink = if a.events { stdout_sink() } else { null_sink() };
    let report = match run_workload_with(&cfg, sink) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bb-bench: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = emit_report(&report, &a.out) {
        eprintln!("bb-bench: {e}");
        return ExitCode::FAILURE;
    }
    println!("{report}");
    if report.failed() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
