//! Binary array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSTA" | version: u16 | record count: u32
//! per record:
//!   name length: u16 | name (UTF-8)
//!   dtype: u8 (1 = f64, 2 = u8) | rank: u8 | shape: rank × u64
//!   payload: element size × product(shape) bytes
//!   crc32 of payload: u32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FSTA";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an FSTA container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("unknown dtype tag {tag} in record `{name}`")]
    UnknownDtype { name: String, tag: u8 },
    #[error("CRC mismatch in record `{name}`: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch {
        name: String,
        stored: u32,
        computed: u32,
    },
    #[error("invalid record `{name}`: {reason}")]
    InvalidRecord { name: String, reason: String },
    #[error("record `{0}` not found")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Record {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        Self {
            name: name.into(),
            shape: vec![bytes.len()],
            data: ArrayData::U8(bytes),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Some(v),
            ArrayData::U8(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.data {
            ArrayData::U8(v) => std::str::from_utf8(v).ok(),
            ArrayData::F64(_) => None,
        }
    }
}

fn invalid(name: &str, reason: impl Into<String>) -> ContainerError {
    ContainerError::InvalidRecord {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| invalid("*", "too many records"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| invalid(&r.name, "name too long"))?;
        let rank = u8::try_from(r.shape.len()).map_err(|_| invalid(&r.name, "rank too large"))?;
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(invalid(&r.name, format!("shape {:?} does not match {} elements", r.shape, r.data.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.data.tag());
        out.push(rank);
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        match &r.data {
            ArrayData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ContainerError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| ContainerError::BadMagic)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| invalid("?", "name is not UTF-8"))?;
        let tag = r.u8(&name)?;
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64(&name)?).map_err(|_| invalid(&name, "dimension overflow"))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| invalid(&name, "shape overflow"))?;
        let elem = match tag {
            1 => 8,
            2 => 1,
            _ => return Err(ContainerError::UnknownDtype { name, tag }),
        };
        let len = n.checked_mul(elem).ok_or_else(|| invalid(&name, "payload overflow"))?;
        let payload = r.take(len, &name)?;
        let stored = r.u32(&name)?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(ContainerError::CrcMismatch {
                name,
                stored,
                computed,
            });
        }
        let data = if tag == 1 {
            ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        } else {
            ArrayData::U8(payload.to_vec())
        };
        records.push(Record { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(invalid("*", "trailing bytes after the last record"));
    }
    Ok(records)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ContainerError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<(), ContainerError> {
    write_atomic(path, &encode(records)?)
}

pub fn read_container(path: &Path) -> Result<Vec<Record>, ContainerError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record, ContainerError> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| ContainerError::Missing(name.to_string()))
}
