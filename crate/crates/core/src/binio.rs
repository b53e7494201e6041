//! Little-endian read helpers that track the current byte offset so format
//! errors can point at the exact position.

use crate::error::{CoreError, Result};
use std::io::Read;

pub(crate) struct Reader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let at = self.offset;
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CoreError::format(at, format!("truncated: expected {} more bytes", n)))?;
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.bytes(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.offset;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| CoreError::format(at, "string is not valid UTF-8"))
    }
}
