//! `GIVCKPT1` checkpoint files.
//!
//! Layout: the 8-byte magic, then records until end of file. Each record is
//! `name_len: u64`, `name: [u8; name_len]` (UTF-8), `rank: u64`,
//! `dims: [u64; rank]`, then `product(dims)` little-endian `f32` values.
//! Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GIVCKPT1";

/// One named array in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl CheckpointRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let r = Self {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(r.dims.iter().product::<usize>(), r.data.len());
        r
    }
}

pub fn write_checkpoint(path: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::format(path, detail))
}

pub(crate) fn encode(w: &mut impl Write, records: &[CheckpointRecord]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u64).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Vec<CheckpointRecord>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let name_len = c.u64()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| "record name is not UTF-8".to_string())?
            .to_string();
        let rank = c.u64()? as usize;
        if rank > 16 {
            return Err(format!("record {name}: implausible rank {rank}"));
        }
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("record {name}: dims overflow"))?;
        let raw = c.take(n.checked_mul(4).ok_or("size overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(CheckpointRecord { name, dims, data });
    }
    Ok(out)
}
