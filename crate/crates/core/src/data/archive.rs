//! Tensor archive: the single on-disk container for checkpoints, datasets
//! and generated outlier sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SONA"
//! u32     format version (currently 1)
//! u32     entry count
//! entry*  u8 name-length, name bytes (ASCII), u8 kind, u8 ndim,
//!         ndim x u32 dims, payload
//! ```
//!
//! Kind 0 is a dense row-major `f32` tensor whose payload is exactly
//! `prod(dims)` little-endian reals; kind 1 is a UTF-8 metadata string whose
//! payload is a `u32` byte length followed by the bytes (`ndim` is 0).
//!
//! Readers validate everything before allocating: a corrupt or truncated
//! header fails with [`Error::Format`] carrying the byte offset, never with
//! a silently wrong tensor. Writes go through a temp file + rename so a
//! crashed process cannot leave a half-written artifact at the target path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SONA";
const VERSION: u32 = 1;
const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Text(String),
}

#[derive(Debug, Default, Clone)]
pub struct Archive {
    names: Vec<String>,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new() -> Archive {
        Archive::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Entry names in insertion order (which is also serialization order).
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    fn validate_name(&self, name: &str) -> Result<()> {
        if name.is_empty() || name.len() > 255 {
            return Err(Error::invalid(format!(
                "entry name must be 1..=255 bytes, got {}",
                name.len()
            )));
        }
        if !name.is_ascii() {
            return Err(Error::invalid(format!("entry name `{name}` is not ASCII")));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate entry name `{name}`")));
        }
        Ok(())
    }

    pub fn put_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.validate_name(name)?;
        t.ensure_finite("archive::put_tensor")?;
        if t.ndim() == 0 || t.ndim() > 255 {
            return Err(Error::invalid(format!(
                "tensor rank must be 1..=255, got {}",
                t.ndim()
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(Entry::Tensor(t));
        Ok(())
    }

    pub fn put_text(&mut self, name: &str, text: impl Into<String>) -> Result<()> {
        self.validate_name(name)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(Entry::Text(text.into()));
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::config(format!("archive has no entry `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entry(name)? {
            Entry::Tensor(t) => Ok(t),
            Entry::Text(_) => Err(Error::config(format!(
                "archive entry `{name}` is metadata, expected a tensor"
            ))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entry(name)? {
            Entry::Text(s) => Ok(s),
            Entry::Tensor(_) => Err(Error::config(format!(
                "archive entry `{name}` is a tensor, expected metadata"
            ))),
        }
    }

    // ── Serialization ───────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in self.names.iter().zip(&self.entries) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => {
                    out.push(KIND_TENSOR);
                    out.push(t.ndim() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.push(KIND_TEXT);
                    out.push(0); // metadata entries carry no dims
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported format version {version}"),
            ));
        }
        let count = r.u32("entry count")? as usize;
        let mut archive = Archive::new();
        for i in 0..count {
            let name_off = r.pos as u64;
            let name_len = r.u8("name length")? as usize;
            if name_len == 0 {
                return Err(Error::format(name_off, format!("entry {i} has empty name")));
            }
            let name_bytes = r.take(name_len, "name")?.to_vec();
            let name = String::from_utf8(name_bytes)
                .ok()
                .filter(|s| s.is_ascii())
                .ok_or_else(|| Error::format(name_off + 1, format!("entry {i} name is not ASCII")))?;
            let kind_off = r.pos as u64;
            let kind = r.u8("kind")?;
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dimension")? as usize);
            }
            match kind {
                KIND_TENSOR => {
                    if ndim == 0 {
                        return Err(Error::format(
                            kind_off + 1,
                            format!("tensor entry `{name}` has zero rank"),
                        ));
                    }
                    let payload_off = r.pos as u64;
                    let mut elems: usize = 1;
                    for &d in &dims {
                        elems = elems.checked_mul(d).ok_or_else(|| {
                            Error::format(
                                payload_off,
                                format!("tensor `{name}` dims {dims:?} overflow"),
                            )
                        })?;
                    }
                    let nbytes = elems.checked_mul(4).ok_or_else(|| {
                        Error::format(payload_off, format!("tensor `{name}` size overflow"))
                    })?;
                    let raw = r.take(nbytes, "tensor payload")?;
                    let mut data = Vec::with_capacity(elems);
                    for chunk in raw.chunks_exact(4) {
                        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                    }
                    let t = Tensor::new(dims, data);
                    t.ensure_finite("archive::load").map_err(|_| {
                        Error::format(
                            payload_off,
                            format!("tensor `{name}` contains non-finite values"),
                        )
                    })?;
                    archive.put_tensor(&name, t).map_err(|e| match e {
                        Error::InvalidArgument(msg) => Error::format(name_off, msg),
                        other => other,
                    })?;
                }
                KIND_TEXT => {
                    if ndim != 0 {
                        return Err(Error::format(
                            kind_off + 1,
                            format!("metadata entry `{name}` has nonzero rank {ndim}"),
                        ));
                    }
                    let len_off = r.pos as u64;
                    let len = r.u32("metadata length")? as usize;
                    let raw = r.take(len, "metadata payload")?.to_vec();
                    let s = String::from_utf8(raw).map_err(|_| {
                        Error::format(len_off + 4, format!("metadata `{name}` is not UTF-8"))
                    })?;
                    archive.put_text(&name, s).map_err(|e| match e {
                        Error::InvalidArgument(msg) => Error::format(name_off, msg),
                        other => other,
                    })?;
                }
                other => {
                    return Err(Error::format(
                        kind_off,
                        format!("entry `{name}` has unknown kind {other}"),
                    ));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(archive)
    }

    /// Atomic write: serialize to `<path>.tmp`, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

/// Write `bytes` to `path` via a sibling temp file and rename, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()))
    }
}
