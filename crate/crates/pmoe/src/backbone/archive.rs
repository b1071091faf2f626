//! Portable binary weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "PMWA"
//! version u32      currently 1
//! count   u32      number of entries
//! entry:  name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!         rank u8, dims (u64 x rank), elements (little-endian, row-major)
//! ```
//!
//! Reads validate the magic, version, dtype, and payload length, and report
//! the byte offset of the first problem. A failed read never yields a
//! partial archive. Text manifests (for example a model config) are stored
//! as one f64 element per UTF-8 byte so the format stays tensors-only.

use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PMWA";
const VERSION: u32 = 1;

/// Named tensors, order-preserving. Round-trips bit-exactly through
/// [`WeightArchive::write`] and [`WeightArchive::read`].
#[derive(Debug, Clone, Default)]
pub struct WeightArchive {
    entries: Vec<(String, Tensor)>,
}

impl WeightArchive {
    pub fn new() -> Self {
        WeightArchive::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.entries.push((name.to_string(), tensor));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("archive has no entry named {name:?}")))
    }

    /// Store a non-empty UTF-8 string as an entry (one f64 per byte).
    pub fn push_text(&mut self, name: &str, text: &str) {
        debug_assert!(!text.is_empty());
        let data: Vec<f64> = text.bytes().map(|b| b as f64).collect();
        let len = data.len();
        self.push(name, Tensor::from_vec(data, &[len]).expect("static shape"));
    }

    /// Decode an entry written by [`WeightArchive::push_text`].
    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.tensor(name)?;
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Data(format!("entry {name:?} is not encoded text")))
                }
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Data(format!("entry {name:?} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(1); // f64
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"PMWA\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_offset = r.offset;
            let name_bytes = r.take(name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::format(name_offset as u64, "entry name is not UTF-8"))?
                .to_string();
            let dtype_offset = r.offset;
            let dtype = r.u8("dtype")?;
            let elem_size = match dtype {
                0 => 4,
                1 => 8,
                other => {
                    return Err(Error::format(
                        dtype_offset as u64,
                        format!("unknown dtype code {other}"),
                    ))
                }
            };
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dimension")? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload_offset = r.offset;
            let payload = r.take(numel * elem_size, "element payload")?;
            let data: Vec<f64> = match dtype {
                0 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                _ => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let shape = if dims.is_empty() { vec![1] } else { dims };
            let tensor = Tensor::from_vec(data, &shape).map_err(|e| {
                Error::format(payload_offset as u64, format!("bad entry {name:?}: {e}"))
            })?;
            entries.push((name, tensor));
        }
        if r.offset != bytes.len() {
            return Err(Error::format(
                r.offset as u64,
                format!("{} trailing bytes after last entry", bytes.len() - r.offset),
            ));
        }
        Ok(WeightArchive { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format(
                self.offset as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, have {}",
                    self.bytes.len() - self.offset
                ),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
