//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use crate::error::{EnkiError, Result};

/// Element encoding code stored in stack and checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A reader that knows its byte position, so every failure can say where it
/// happened.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R, offset: u64) -> Self {
        ByteReader { inner, offset }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fail(&self, message: impl Into<String>) -> EnkiError {
        EnkiError::format(self.offset, message)
    }

    pub fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.fail(format!("file truncated while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.fill(&mut m, "magic")?;
        if &m != expected {
            self.offset -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expected)
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

    /// Check a version word, reporting the offset of the word itself.
    pub fn version(&mut self, supported: u32) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != supported {
            return Err(EnkiError::format(at, format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    pub fn values(&mut self, count: usize, dtype: Dtype, what: &str) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; count * dtype.size()];
        self.fill(&mut raw, what)?;
        Ok(match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_values(w: &mut impl Write, values: &[f64], dtype: Dtype) -> io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        Dtype::F32 => values.iter().for_each(|v| buf.extend((*v as f32).to_le_bytes())),
        Dtype::F64 => values.iter().for_each(|v| buf.extend(v.to_le_bytes())),
    }
    w.write_all(&buf)
}

pub(crate) fn u32_field(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| EnkiError::invalid(format!("{what} {value} does not fit in u32")))
}
