//! Binary tensor records.
//!
//! A record is `"CSKT"`, `u32` element width in bytes (4 or 8), `u32` rank,
//! `rank` x `u32` dims, then the little-endian payload. Named-record
//! containers prefix a 4-byte magic, a length-prefixed UTF-8 header and a
//! record count; each record is a length-prefixed name followed by a tensor.

use std::io::{Read, Write};

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CSKT";

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.rank() + t.len() * T::BYTES as usize);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&T::BYTES.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reader that tracks its byte offset for error reporting.
pub(crate) struct Cursor<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                Error::format(self.offset, format!("truncated: expected {n} more bytes"))
            }
            _ => Error::Io(e),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u32_le(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub(crate) fn read_tensor_from<T: Element, R: Read>(c: &mut Cursor<R>) -> Result<Tensor<T>> {
    let start = c.offset;
    let magic = c.bytes(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(start, format!("bad tensor magic {magic:?}")));
    }
    let width_at = c.offset;
    let width = c.u32_le()?;
    let rank = c.u32_le()? as usize;
    if rank > 8 {
        return Err(Error::format(width_at + 4, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = c.offset;
        let d = c.u32_le()? as usize;
        if d == 0 {
            return Err(Error::format(at, "zero dimension"));
        }
        shape.push(d);
    }
    let n = numel(&shape);
    let raw = c.bytes(n * width as usize)?;
    let data: Vec<T> = match width {
        4 => raw
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::read_le(b)).unwrap_or_else(T::nan))
            .collect(),
        8 => raw
            .chunks_exact(8)
            .map(|b| T::from_f64(f64::read_le(b)).unwrap_or_else(T::nan))
            .collect(),
        other => return Err(Error::format(width_at, format!("unsupported element width {other}"))),
    };
    Ok(Tensor::from_parts(shape, data))
}

pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    read_tensor_from(&mut Cursor::new(r))
}

pub fn write_named_records<'a, T, W, I>(w: &mut W, magic: &[u8; 4], header: &str, records: I) -> Result<()>
where
    T: Element,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(magic)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Inverse of [`write_named_records`]; returns the header text and records in file order.
pub fn read_named_records<T: Element, R: Read>(
    r: &mut R,
    magic: &[u8; 4],
) -> Result<(String, Vec<(String, Tensor<T>)>)> {
    let mut c = Cursor::new(r);
    let got = c.bytes(4)?;
    if got != magic {
        return Err(Error::format(0, format!("bad magic {got:?}, expected {magic:?}")));
    }
    let at = c.offset;
    let len = c.u32_le()? as usize;
    let header = String::from_utf8(c.bytes(len)?)
        .map_err(|_| Error::format(at + 4, "header is not UTF-8"))?;
    let count = c.u32_le()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = c.offset;
        let len = c.u32_le()? as usize;
        let name = String::from_utf8(c.bytes(len)?)
            .map_err(|_| Error::format(at + 4, "record name is not UTF-8"))?;
        records.push((name, read_tensor_from(&mut c)?));
    }
    Ok((header, records))
}
