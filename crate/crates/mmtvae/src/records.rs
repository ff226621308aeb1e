//! Binary container shared by checkpoints, dataset samples and KDE files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [u8; 4] | version u32 | header_len u32 | header (JSON bytes)
//! record_count u32 | records...
//! record: name_len u16 | name (UTF-8) | dtype u8 | rank u8 | extents u32 * rank | values
//! ```
//!
//! The only dtype is `0` (`f32`). Tensors are held at `f32` precision in
//! memory wherever they are persisted, so the narrowing is lossless.

use mmtvae_core::Tensor;

use crate::error::{format_err, Result};

pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Refuse to allocate more than this many values for one record.
const MAX_VALUES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Vec<u8>,
    pub records: Vec<(String, Tensor)>,
}

pub fn encode(magic: &[u8; 4], header: &[u8], records: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let payload: usize = records.iter().map(|(n, t)| 8 + n.len() + 4 * t.shape().len() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(header.len(), "header")?.to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&len_u32(records.len(), "record count")?.to_le_bytes());
    for (name, t) in records {
        let nb = name.as_bytes();
        let nlen = u16::try_from(nb.len()).map_err(|_| format_err(format!("record name too long: {name}")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(nb);
        let rank = u8::try_from(t.shape().len()).map_err(|_| format_err(format!("rank too large for {name}")))?;
        out.push(DTYPE_F32);
        out.push(rank);
        for &e in t.shape() {
            out.extend_from_slice(&len_u32(e, "extent")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| format_err(format!("{what} {n} does not fit in u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("truncated record file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<Container> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let m = c.take(4)?;
    if m != magic {
        return Err(format_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header = c.take(hlen)?.to_vec();
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| format_err("record name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(format_err(format!("record {name}: unknown dtype {dtype}")));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n <= MAX_VALUES)
            .ok_or_else(|| format_err(format!("record {name}: shape {shape:?} too large")))?;
        let raw = c.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after last record", bytes.len() - c.pos)));
    }
    Ok(Container { header, records })
}

impl Container {
    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let i = self.records.iter().position(|(n, _)| n == name)?;
        Some(self.records.remove(i).1)
    }
}
