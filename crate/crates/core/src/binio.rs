//! Internal helpers for the little-endian binary file formats (FCM1 datasets
//! and HGAL checkpoints): error construction and an offset-tracking reader so
//! truncation errors can report where the file ended.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Byte reader that remembers its position so short reads can say
/// "truncated at offset N".
pub(crate) struct LeReader<R> {
    inner: R,
    path: PathBuf,
    offset: usize,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self { inner, path: path.to_path_buf(), offset: 0 }
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format_err(&self.path, format!("truncated at offset {}", self.offset))
            } else {
                io_err(&self.path, e)
            }
        })?;
        self.offset += buf.len();
        Ok(())
    }

    pub(crate) fn read_u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.read_exact(&mut buf)?;
        Ok(buf[0])
    }

    pub(crate) fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub(crate) fn read_f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 8];
        self.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}
