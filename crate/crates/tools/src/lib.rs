//! Shared helpers for the bb-* programs.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ArgError {
    #[error("bad size {0:?}")]
    Size(String),
    #[error("bad duration {0:?}")]
    Duration(String),
}

/// Parse a byte count such as `4096`, `64M`, `1GiB` or `2g`. Suffixes are
/// binary.
pub fn parse_size(s: &str) -> Result<u64, ArgError> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| ArgError::Size(s.into()))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        _ => return Err(ArgError::Size(s.into())),
    };
    n.checked_mul(1u64 << shift).ok_or_else(|| ArgError::Size(s.into()))
}

/// Seconds, fractional allowed.
pub fn parse_secs(s: &str) -> Result<Duration, ArgError> {
    let v: f64 = s.trim().parse().map_err(|_| ArgError::Duration(s.into()))?;
    if !v.is_finite() || v < 0.0 {
        return Err(ArgError::Duration(s.into()));
    }
    Ok(Duration::from_secs_f64(v))
}

/// Block the calling thread for good; the runtimes live on other threads.
pub fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}
