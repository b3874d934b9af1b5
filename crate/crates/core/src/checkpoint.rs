//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"D3DW"`, version `u32`, parameter count `u32`, then
//! per parameter: name length `u16`, UTF-8 name, rank `u8`, `rank` extents as
//! `u32`, raw `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const MAGIC: &[u8; 4] = b"D3DW";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &Parameters) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * params.num_scalars() + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format("checkpoint", format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("checkpoint", format!("extent too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Parameters> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != buf.len() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(params)
}

pub fn save(params: &Parameters, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Parameters> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -0.5]).unwrap()).unwrap();
        let b = to_bytes(&p).unwrap();
        assert_eq!(&b[..4], b"D3DW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'w');
        assert_eq!(b[15], 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(from_bytes(b"D3DX\x01\0\0\0\0\0\0\0").is_err());
        assert!(from_bytes(b"D3DW\x01\0\0\0\x01\0\0\0").is_err());
    }
}
