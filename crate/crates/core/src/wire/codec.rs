use bytes::{BufMut, Bytes, BytesMut};

use super::{MsgType, WireError};

/// Big-endian payload builder.
#[derive(Debug, Default)]
pub struct PayloadWriter {
    buf: BytesMut,
    /// Finished segments; large blobs are kept by reference here.
    parts: Vec<Bytes>,
}

/// Blobs at least this long are not copied by `blob_bytes`.
const SHARE_THRESHOLD: usize = 4096;

impl PayloadWriter {
    pub fn new() -> Self {
        PayloadWriter::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        PayloadWriter {
            buf: BytesMut::with_capacity(cap),
            parts: Vec::new(),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.put_u8(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.put_u16(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.put_u32(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.put_u64(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    /// u16 length prefix + UTF-8 bytes. Strings longer than 65535 bytes are
    /// truncated at a char boundary; identifiers never get close.
    pub fn str(&mut self, s: &str) -> &mut Self {
        let mut end = s.len().min(u16::MAX as usize);
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        self.u16(end as u16);
        self.buf.put_slice(&s.as_bytes()[..end]);
        self
    }

    /// u32 length prefix + raw bytes.
    pub fn blob(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.put_slice(b);
        self
    }

    /// Like `blob`, but large payloads are referenced rather than copied.
    pub fn blob_bytes(&mut self, b: &Bytes) -> &mut Self {
        if b.len() < SHARE_THRESHOLD {
            return self.blob(b);
        }
        self.u32(b.len() as u32);
        if !self.buf.is_empty() {
            self.parts.push(self.buf.split().freeze());
        }
        self.parts.push(b.clone());
        self
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum::<usize>() + self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The payload as one contiguous buffer.
    pub fn finish(self) -> Bytes {
        if self.parts.is_empty() {
            return self.buf.freeze();
        }
        let mut out = BytesMut::with_capacity(self.len());
        for p in &self.parts {
            out.put_slice(p);
        }
        out.put_slice(&self.buf);
        out.freeze()
    }

    /// The payload as consecutive segments, for vectored writes.
    pub fn finish_parts(mut self) -> Vec<Bytes> {
        if !self.buf.is_empty() {
            self.parts.push(self.buf.freeze());
        }
        self.parts
    }
}

/// Bounds-checked big-endian payload reader. Blobs are sliced out of the
/// source buffer without copying.
#[derive(Debug)]
pub struct PayloadReader {
    msg_type: MsgType,
    buf: Bytes,
    pos: usize,
}

impl PayloadReader {
    pub fn new(msg_type: MsgType, buf: Bytes) -> Self {
        PayloadReader {
            msg_type,
            buf,
            pos: 0,
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> WireError {
        WireError::Malformed {
            msg_type: self.msg_type,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.malformed(format!("bad bool {v}"))),
        }
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.malformed("string is not UTF-8"))
    }

    pub fn blob(&mut self) -> Result<Bytes, WireError> {
        let len = self.u32()? as usize;
        self.take(len)?;
        Ok(self.buf.slice(self.pos - len..self.pos))
    }

    /// Element count for a list; rejects counts that cannot possibly fit in
    /// the remaining bytes given a minimum element size.
    pub fn count(&mut self, min_elem: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem.max(1)) > self.buf.len() - self.pos {
            return Err(self.malformed(format!("list of {n} elements overruns payload")));
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(self.malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
