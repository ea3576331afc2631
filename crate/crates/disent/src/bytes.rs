//! Little-endian record primitives shared by the checkpoint and dataset
//! cache formats.

use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn truncated(&self, need: usize) -> Error {
        Error::CheckpointTruncated {
            msg: format!(
                "{}: needed {need} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.buf.len()
            ),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.truncated(n));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Tensor record: u16 name length, UTF-8 name, u8 rank, u64 dims,
/// raw 64-bit little-endian float data.
pub(crate) fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
}

pub(crate) fn get_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::CheckpointInvalid {
            msg: "parameter name is not valid UTF-8".into(),
        })?
        .to_string();
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()? as Real);
    }
    let t = Tensor::new(data, &shape).map_err(|e| Error::CheckpointInvalid {
        msg: format!("tensor {name}: {e}"),
    })?;
    Ok((name, t))
}

/// Length-prefixed (u32) UTF-8 text block.
pub(crate) fn put_text(out: &mut Vec<u8>, text: &str) {
    put_u32(out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
}

pub(crate) fn get_text(r: &mut Reader) -> Result<String> {
    let len = r.u32()? as usize;
    Ok(std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::CheckpointInvalid {
            msg: "text block is not valid UTF-8".into(),
        })?
        .to_string())
}
