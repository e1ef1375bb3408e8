use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use burstbuf::net::BbClient;
use burstbuf::placement::Strategy;
use bytes::Bytes;
use clap::{Parser, Subcommand};

/// Talk to a running burst buffer.
#[derive(Parser)]
#[command(name = "bb-cli")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7000")]
    manager_addr: String,
    #[arg(long, default_value_t = 0)]
    rank: u32,
    #[arg(long, default_value = "ketama")]
    placement: Strategy,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a local file (or stdin) into the buffer.
    Put {
        file_id: String,
        /// Source path; `-` reads stdin.
        #[arg(default_value = "-")]
        input: PathBuf,
        #[arg(long, default_value = "0", value_parser = bbtools::parse_size)]
        offset: u64,
        #[arg(long, default_value_t = 1)]
        epoch: u32,
        /// Records are cut to this size.
        #[arg(long, default_value = "1M", value_parser = bbtools::parse_size)]
        chunk: u64,
    },
    /// Read a byte range back and write it to stdout or a file.
    Get {
        file_id: String,
        #[arg(value_parser = bbtools::parse_size)]
        offset: u64,
        #[arg(value_parser = bbtools::parse_size)]
        length: u64,
        /// Epoch to read; latest when omitted.
        #[arg(long)]
        epoch: Option<u32>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Drain one epoch to the backing directory.
    Flush {
        #[arg(long, default_value_t = 1)]
        epoch: u32,
    },
}

fn run(args: Args) -> Result<(), String> {
    let client = BbClient::open(&args.manager_addr, args.rank, args.placement).map_err(|e| e.to_string())?;
    match args.cmd {
        Cmd::Put { file_id, input, offset, epoch, chunk } => {
            if chunk == 0 {
                return Err("chunk must be positive".into());
            }
            let mut data = Vec::new();
            if input.as_os_str() == "-" {
                std::io::stdin().read_to_end(&mut data).map_err(|e| e.to_string())?;
            } else {
                data = std::fs::read(&input).map_err(|e| format!("{}: {e}", input.display()))?;
            }
            client.set_epoch(epoch);
            let data = Bytes::from(data);
            let mut pos = 0usize;
            while pos < data.len() {
                let end = (pos + chunk as usize).min(data.len());
                client
                    .write(&file_id, offset + pos as u64, data.slice(pos..end))
                    .map_err(|e| e.to_string())?;
                pos = end;
            }
            client.wait().map_err(|e| e.to_string())?;
            eprintln!("put {} bytes to {file_id}@{offset} epoch {epoch}", data.len());
        }
        Cmd::Get { file_id, offset, length, epoch, out } => {
            let data = match epoch {
                Some(e) => client.read_epoch(&file_id, offset, length, e),
                None => client.read(&file_id, offset, length),
            }
            .map_err(|e| e.to_string())?;
            match out {
                Some(p) => std::fs::write(&p, &data).map_err(|e| format!("{}: {e}", p.display()))?,
                None => std::io::stdout().write_all(&data).map_err(|e| e.to_string())?,
            }
        }
        Cmd::Flush { epoch } => {
            client.flush(epoch).map_err(|e| e.to_string())?;
            eprintln!("flushed epoch {epoch}");
        }
    }
    client.close();
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bb-cli: {e}");
            ExitCode::FAILURE
        }
    }
}
