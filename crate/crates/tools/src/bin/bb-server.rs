use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use burstbuf::net::{bind, stdout_sink, Runtime};
use burstbuf::{ServerConfig, ServerNode};
use clap::Parser;

/// Burst buffer server.
#[derive(Parser)]
#[command(name = "bb-server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7100")]
    listen_addr: String,
    #[arg(long, default_value = "127.0.0.1:7000")]
    manager_addr: String,
    /// Memory tier budget, e.g. 2G. 0 sends everything to the spill file.
    #[arg(long, default_value = "1G", value_parser = bbtools::parse_size)]
    mem_capacity: u64,
    #[arg(long, default_value = "/tmp")]
    spill_dir: PathBuf,
    #[arg(long, default_value = "/tmp/bb_pfs")]
    pfs_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    replicas: usize,
    #[arg(long, default_value_t = 2)]
    successors: usize,
    #[arg(long, default_value_t = 500)]
    stabilize_ms: u64,
    /// Spill locally instead of redirecting when memory is full.
    #[arg(long)]
    no_redirect: bool,
    /// Leave spilled records in the page cache instead of syncing each one.
    #[arg(long)]
    no_spill_sync: bool,
    /// Join a running ring behind the server with this id instead of
    /// registering for bootstrap.
    #[arg(long)]
    join_predecessor: Option<u32>,
}

fn main() -> ExitCode {
    let a = Args::parse();
    let (listener, addr) = match bind(&a.listen_addr) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("bb-server: cannot listen on {}: {e}", a.listen_addr);
            return ExitCode::FAILURE;
        }
    };
    let mut cfg = ServerConfig::new(addr, a.manager_addr);
    cfg.mem_capacity = a.mem_capacity;
    cfg.spill_dir = a.spill_dir;
    cfg.pfs_dir = a.pfs_dir;
    cfg.replicas = a.replicas;
    cfg.successors = a.successors;
    cfg.stabilize = Duration::from_millis(a.stabilize_ms);
    cfg.redirect = !a.no_redirect;
    cfg.spill_sync = !a.no_spill_sync;
    cfg.join_predecessor = a.join_predecessor;
    match Runtime::start(ServerNode::new(cfg), Some(listener), stdout_sink()) {
        Ok(_rt) => bbtools::park_forever(),
        Err(e) => {
            eprintln!("bb-server: {e}");
            ExitCode::FAILURE
        }
    }
}
