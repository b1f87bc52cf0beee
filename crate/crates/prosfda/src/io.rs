//! Little-endian binary container helpers shared by the checkpoint, dataset,
//! and run-log formats. Readers fail with descriptive errors on truncation
//! and on trailing garbage, never returning partial data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct BinWriter<W: Write> {
    inner: W,
}

impl BinWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("create {}: {e}", path.display())))
        })?;
        Ok(Self { inner: BufWriter::new(file) })
    }
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.inner.write_all(magic)?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u128(&mut self, v: u128) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn bytes(&mut self, bs: &[u8]) -> Result<()> {
        self.inner.write_all(bs)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub struct BinReader<R: Read> {
    inner: R,
    context: String,
}

impl BinReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("open {}: {e}", path.display())))
        })?;
        Ok(Self { inner: BufReader::new(file), context: path.display().to_string() })
    }
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R, context: impl Into<String>) -> Self {
        Self { inner, context: context.into() }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            Error::Format(format!("{}: truncated while reading {what}", self.context))
        })
    }

    /// Reads and checks a 4-byte magic tag.
    pub fn expect_magic(&mut self, magic: &[u8; 4], kind: &str) -> Result<()> {
        let mut got = [0u8; 4];
        self.fill(&mut got, "magic tag")?;
        if &got != magic {
            return Err(Error::Format(format!(
                "{}: not a {kind} file (bad magic {:?})",
                self.context, got
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        let mut b = [0u8; 16];
        self.fill(&mut b, what)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            self.fill(&mut buf, what)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut out = vec![0u8; n];
        self.fill(&mut out, what)?;
        Ok(out)
    }

    /// Asserts the stream is exhausted; trailing bytes mean a corrupt or
    /// mismatched header.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format(format!(
                "{}: trailing bytes after payload (header/payload mismatch)",
                self.context
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

/// Bounds-checks a declared element count before allocation.
pub fn check_count(n: u64, limit: u64, what: &str, context: &str) -> Result<usize> {
    if n > limit {
        return Err(Error::Format(format!(
            "{context}: implausible {what} count {n} (limit {limit})"
        )));
    }
    Ok(n as usize)
}
