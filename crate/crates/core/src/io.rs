//! Line-delimited JSON helpers and the tensor container shared by checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ndiff::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: String, line: usize, source: serde_json::Error },
    #[error("{path}: malformed checkpoint: {detail}")]
    Format { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    fs::write(path, to_jsonl(records)).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|source| IoError::Json { path: path.display().to_string(), line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.display().to_string(), line: 0, source })
}

const MAGIC: &[u8; 4] = b"CSTR";
pub const CONTAINER_VERSION: u32 = 1;

/// Sha-256 over names, shapes and little-endian bytes, in the given order.
pub fn fingerprint<'t>(tensors: impl IntoIterator<Item = (&'t str, &'t Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Layout: magic, u32 version, u64 header length, JSON header, u32 tensor
/// count, then per tensor: u32 name length, name, u32 rank, u64 dims, f32 data.
/// All integers and floats little-endian.
pub fn save_container<H: Serialize>(path: &Path, header: &H, tensors: &[(&str, &Tensor)]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    let header = serde_json::to_vec(header).expect("header serializes");
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // write-then-rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, Tensor)>), IoError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
    let bad = |detail: &str| IoError::Format { path: path.display().to_string(), detail: detail.to_string() };
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    match c.u32() {
        Some(CONTAINER_VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported version {v}"))),
        None => return Err(bad("truncated")),
    }
    let hlen = c.u64().ok_or_else(|| bad("truncated"))? as usize;
    let hbytes = c.take(hlen).ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(hbytes).map_err(|e| bad(&format!("header: {e}")))?;
    let count = c.u32().ok_or_else(|| bad("truncated"))?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = c.u32().ok_or_else(|| bad("truncated"))? as usize;
        let name = c.take(nlen).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not utf-8"))?;
        let rank = c.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let bytes = c.take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?).ok_or_else(|| bad(&format!("truncated tensor {name}")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        if !t.is_finite() {
            return Err(bad(&format!("tensor {name} has non-finite values")));
        }
        tensors.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, tensors))
}
