//! Checkpoint directory format: `meta.json` plus a binary tensor archive.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic  b"PGTA" | version u32 | count u32
//! repeated count times:
//!   name_len u32 | name (UTF-8) | dtype u8 (0 = f32) | ndim u32 | dims u64 * ndim | payload f32 * numel
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PGTA";
const ARCHIVE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub iteration: u64,
    /// Echo of the configuration the checkpoint was produced with.
    pub config: serde_json::Value,
    /// Free-form state (RNG streams, history buffers) needed to resume.
    #[serde(default)]
    pub state: serde_json::Value,
}

pub fn write_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&ARCHIVE_VERSION.to_le_bytes())?;
    put(&(entries.len() as u32).to_le_bytes())?;
    for entry in entries {
        let name = entry.name.as_bytes();
        put(&(name.len() as u32).to_le_bytes())?;
        put(name)?;
        put(&[DTYPE_F32])?;
        let shape = entry.tensor.shape();
        put(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            put(&(*d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(entry.tensor.numel() * 4);
        for v in entry.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        put(&payload)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated tensor archive".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a tensor archive", path.display())));
    }
    let version = c.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 4)?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        entries.push(ArchiveEntry { name, tensor: Tensor::from_vec(&shape, data)? });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor archive".into()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f32::ANY, 0..64),
            name in "[a-z./0-9]{1,24}",
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.bin");
            let n = values.len();
            let entries = vec![
                ArchiveEntry { name: name.clone(), tensor: Tensor::from_vec(&[n], values.clone()).unwrap() },
                ArchiveEntry { name: "scalar".into(), tensor: Tensor::scalar(1.5) },
            ];
            write_archive(&path, &entries).unwrap();
            let back = read_archive(&path).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].name, &name);
            let bits: Vec<u32> = back[0].tensor.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!(back[1].tensor.shape(), &[] as &[usize]);
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries = vec![ArchiveEntry { name: "w".into(), tensor: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap() }];
        write_archive(&path, &entries).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"nope").unwrap();
        assert!(read_archive(&path).is_err());
    }
}
