//! Binary container shared by dataset and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4  "AFUS"
//! version u16
//! kind    u8   1 = dataset, 2 = checkpoint
//! pad     u8   0
//! seed    u64
//! hash    str  config hash (u32 length + UTF-8)
//! body    …    kind-specific
//! digest  32   sha256 of every preceding byte
//! ```
//!
//! A tensor is `u8 rank`, `rank × u32 dims`, then `Π dims` f64 values.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFUS";
pub const VERSION: u16 = 1;
pub const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Dataset = 1,
    Checkpoint = 2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub kind: Kind,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(header: &Header) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u8(header.kind as u8);
        w.u8(0);
        w.u64(header.seed);
        w.str(&header.config_hash);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bools(&mut self, v: &[bool]) {
        self.u32(v.len() as u32);
        self.buf.extend(v.iter().map(|&b| b as u8));
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

/// Writes to a sibling temp file and renames, so a failed write never leaves
/// a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version, kind and the trailing digest, and returns a
    /// reader positioned at the start of the body.
    pub fn open(buf: &'a [u8], kind: Kind) -> Result<(Header, Reader<'a>)> {
        if buf.len() < MAGIC.len() + 2 + 2 + 8 + 4 + DIGEST_LEN {
            return Err(Error::format(buf.len() as u64, "file too short for header and digest"));
        }
        let end = buf.len() - DIGEST_LEN;
        let mut r = Reader { buf, pos: 0, end };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected AFUS"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let k = r.u8()?;
        if k != kind as u8 {
            return Err(Error::format(6, format!("container kind {k}, expected {}", kind as u8)));
        }
        r.u8()?;
        let seed = r.u64()?;
        let config_hash = r.str()?;
        let digest = Sha256::digest(&buf[..end]);
        if digest.as_slice() != &buf[end..] {
            return Err(Error::format(end as u64, "checksum mismatch"));
        }
        Ok((Header { kind, seed, config_hash }, r))
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.end - self.pos {
            return Err(Error::format(
                self.pos as u64,
                format!("need {n} bytes, {} left", self.end - self.pos),
            ));
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

    pub fn str(&mut self) -> Result<String> {
        let at = self.offset();
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, "string is not UTF-8"))
    }

    pub fn bools(&mut self) -> Result<Vec<bool>> {
        let n = self.u32()? as usize;
        let at = self.offset();
        self.take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::format(at, format!("invalid flag byte {b}"))),
            })
            .collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.end - self.pos))
            .ok_or_else(|| Error::format(at, format!("tensor shape {shape:?} exceeds file")))?;
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data).map_err(|e| Error::format(at, e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.end {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes before digest", self.end - self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = Writer::new(&Header {
            kind: Kind::Checkpoint,
            seed: 9,
            config_hash: "abc".into(),
        });
        w.tensor(&Tensor::matrix(&[&[1.0, 2.0], &[3.0, -0.5]]).unwrap());
        w.bools(&[true, false]);
        w.finish()
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let (h, mut r) = Reader::open(&bytes, Kind::Checkpoint).unwrap();
        assert_eq!(h.seed, 9);
        assert_eq!(h.config_hash, "abc");
        assert_eq!(r.tensor().unwrap().data(), &[1.0, 2.0, 3.0, -0.5]);
        assert_eq!(r.bools().unwrap(), vec![true, false]);
        r.finish().unwrap();
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let bytes = sample();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            let res = Reader::open(&b, Kind::Checkpoint).and_then(|(_, mut r)| {
                r.tensor()?;
                r.bools()?;
                r.finish()
            });
            assert!(matches!(res, Err(Error::Format { .. })), "flip at {i}");
        }
    }

    #[test]
    fn truncation_and_wrong_kind_are_rejected() {
        let bytes = sample();
        for n in 0..bytes.len() {
            assert!(Reader::open(&bytes[..n], Kind::Checkpoint).is_err(), "prefix {n}");
        }
        assert!(matches!(
            Reader::open(&bytes, Kind::Dataset),
            Err(Error::Format { offset: 6, .. })
        ));
    }
}
