//! Receive buffers carved out of large anonymous mappings.
//!
//! Bulk payloads read off a socket are written back to back into a chunk
//! and handed out as `Bytes` slices that keep the chunk alive. A chunk whose
//! slices have all been dropped is rewound and reused. Chunks ask the kernel
//! for transparent huge pages, so retaining a few hundred MiB of payloads
//! costs a few hundred page faults rather than a hundred thousand.

use std::io::{self, Read};
use std::ptr::NonNull;
use std::sync::Arc;

use bytes::Bytes;

pub const DEFAULT_CHUNK: usize = 32 << 20;

/// Payloads below this size are allocated normally.
pub const MIN_ARENA_LEN: usize = 64 << 10;

struct Chunk {
    ptr: NonNull<u8>,
    len: usize,
}

// The mapping is only written through `Arena`, into ranges no `Slice` covers.
unsafe impl Send for Chunk {}
unsafe impl Sync for Chunk {}

impl Chunk {
    fn map(len: usize) -> io::Result<Chunk> {
        // SAFETY: fresh private anonymous mapping; checked for failure.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        // Advisory; ignored where huge pages are unavailable.
        unsafe {
            libc::madvise(p, len, libc::MADV_HUGEPAGE);
        }
        Ok(Chunk {
            ptr: NonNull::new(p as *mut u8).expect("mmap returned null"),
            len,
        })
    }
}

impl Drop for Chunk {
    fn drop(&mut self) {
        // SAFETY: maps exactly what `map` created.
        unsafe {
            libc::munmap(self.ptr.as_ptr() as *mut libc::c_void, self.len);
        }
    }
}

struct Slice {
    chunk: Arc<Chunk>,
    off: usize,
    len: usize,
}

impl AsRef<[u8]> for Slice {
    fn as_ref(&self) -> &[u8] {
        // SAFETY: in bounds, fully written before the slice was created, and
        // never written again while this slice exists.
        unsafe { std::slice::from_raw_parts(self.chunk.ptr.as_ptr().add(self.off), self.len) }
    }
}

pub struct Arena {
    chunk_len: usize,
    cur: Option<Arc<Chunk>>,
    pos: usize,
}

impl Default for Arena {
    fn default() -> Self {
        Arena::new(DEFAULT_CHUNK)
    }
}

impl Arena {
    pub fn new(chunk_len: usize) -> Self {
        Arena {
            chunk_len,
            cur: None,
            pos: 0,
        }
    }

    /// Read exactly `len` bytes from `r`.
    pub fn read_exact<R: Read + ?Sized>(&mut self, r: &mut R, len: usize) -> io::Result<Bytes> {
        self.fill(len, |dst| r.read_exact(dst))
    }

    /// A `len`-byte buffer written by `f`. The buffer passed to `f` holds
    /// arbitrary bytes and must be overwritten completely.
    pub fn fill(&mut self, len: usize, f: impl FnOnce(&mut [u8]) -> io::Result<()>) -> io::Result<Bytes> {
        if len < MIN_ARENA_LEN || len > self.chunk_len {
            let mut v = vec![0u8; len];
            f(&mut v)?;
            return Ok(Bytes::from(v));
        }
        let chunk = self.room_for(len)?;
        let off = self.pos;
        // SAFETY: [off, off+len) lies in the mapping and is not covered by
        // any live Slice: slices only exist below `pos`, or the chunk was
        // rewound because no slice of it was alive.
        let dst = unsafe { std::slice::from_raw_parts_mut(chunk.ptr.as_ptr().add(off), len) };
        f(dst)?;
        self.pos += len;
        Ok(Bytes::from_owner(Slice { chunk, off, len }))
    }

    fn room_for(&mut self, len: usize) -> io::Result<Arc<Chunk>> {
        if let Some(c) = &mut self.cur {
            if self.pos + len <= c.len {
                return Ok(c.clone());
            }
            if Arc::get_mut(c).is_some() {
                self.pos = 0;
                return Ok(c.clone());
            }
        }
        let c = Arc::new(Chunk::map(self.chunk_len)?);
        self.cur = Some(c.clone());
        self.pos = 0;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(seed: u8, len: usize) -> Vec<u8> {
        (0..len).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)).collect()
    }

    #[test]
    fn slices_survive_later_reads() {
        let mut a = Arena::new(1 << 20);
        let data: Vec<Vec<u8>> = (0..10).map(|i| block(i, 200_000)).collect();
        let stream: Vec<u8> = data.concat();
        let mut r = &stream[..];
        let got: Vec<Bytes> = data.iter().map(|d| a.read_exact(&mut r, d.len()).unwrap()).collect();
        for (g, d) in got.iter().zip(&data) {
            assert_eq!(&g[..], &d[..]);
        }
    }

    #[test]
    fn chunk_is_rewound_only_when_free() {
        let mut a = Arena::new(256 << 10);
        let x = block(1, 200_000);
        let y = block(2, 200_000);
        let first = a.read_exact(&mut &x[..], x.len()).unwrap();
        // does not fit behind `first`, and `first` is alive: new chunk
        let second = a.read_exact(&mut &y[..], y.len()).unwrap();
        assert_eq!(&first[..], &x[..]);
        assert_eq!(&second[..], &y[..]);
        drop(second);
        // the current chunk is free now and gets reused
        let third = a.read_exact(&mut &x[..], x.len()).unwrap();
        assert_eq!(&third[..], &x[..]);
        assert_eq!(&first[..], &x[..]);
    }

    #[test]
    fn small_and_oversized_payloads_bypass_the_arena() {
        let mut a = Arena::new(128 << 10);
        let small = block(3, 100);
        let big = block(4, 300_000);
        assert_eq!(&a.read_exact(&mut &small[..], 100).unwrap()[..], &small[..]);
        assert_eq!(&a.read_exact(&mut &big[..], big.len()).unwrap()[..], &big[..]);
        assert!(a.cur.is_none());
    }

    #[test]
    fn short_input_is_an_error() {
        let mut a = Arena::new(1 << 20);
        let d = block(5, 100_000);
        let e = a.read_exact(&mut &d[..], 100_001).unwrap_err();
        assert_eq!(e.kind(), io::ErrorKind::UnexpectedEof);
    }
}
