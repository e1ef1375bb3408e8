use std::process::ExitCode;
use std::time::Duration;

use burstbuf::net::{bind, stdout_sink, Runtime};
use burstbuf::{Manager, ManagerConfig};
use clap::Parser;

/// Membership manager: assigns server ids, publishes the server list and
/// coordinates flushes.
#[derive(Parser)]
#[command(name = "bb-manager")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7000")]
    manager_addr: String,
    /// Publish the list once this many servers registered.
    #[arg(long)]
    expected_servers: Option<usize>,
    /// Registration window in milliseconds.
    #[arg(long, default_value_t = 3000)]
    wait_ms: u64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (listener, addr) = match bind(&args.manager_addr) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("bb-manager: cannot listen on {}: {e}", args.manager_addr);
            return ExitCode::FAILURE;
        }
    };
    let mut cfg = ManagerConfig::new(addr);
    cfg.expected_servers = args.expected_servers;
    cfg.wait = Duration::from_millis(args.wait_ms);
    match Runtime::start(Manager::new(cfg), Some(listener), stdout_sink()) {
        Ok(_rt) => bbtools::park_forever(),
        Err(e) => {
            eprintln!("bb-manager: {e}");
            ExitCode::FAILURE
        }
    }
}
