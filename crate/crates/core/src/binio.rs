//! Little-endian byte cursor shared by the binary file formats.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: expected {n} more bytes, found {} (file length {})",
                    self.remaining(),
                    self.buf.len()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, what)?);
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    pub(crate) fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    /// Reads `n` f32 values, widening each to f64.
    pub(crate) fn f32s_into(&mut self, n: usize, out: &mut Vec<f64>, what: &str) -> Result<()> {
        let offset = self.offset();
        let raw = self.take(n * 4, what)?;
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !x.is_finite() {
                return Err(Error::Format {
                    offset: offset + 4 * k as u64,
                    message: format!("non-finite value in {what}"),
                });
            }
            out.push(f64::from(x));
        }
        Ok(())
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                offset: self.offset(),
                message: format!("{} trailing bytes after end of data", self.remaining()),
            });
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Rounds every value to the nearest f32 and back.
pub(crate) fn quantize_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
