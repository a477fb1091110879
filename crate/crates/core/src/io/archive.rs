//! Single-file tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..8     magic  "VITBIND1"
//! 8..16    u64    header length H
//! 16..16+H UTF-8 JSON header {"version":1,"metadata":{..},"entries":[..]}
//! 16+H..   payload, raw little-endian f32 data
//! ```
//!
//! Each header entry carries `name`, `dtype` ("f32"), `shape`, and the
//! `offset` / `nbytes` of its data relative to the payload start.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 8] = b"VITBIND1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(default)]
    metadata: Map<String, Value>,
    entries: Vec<EntryMeta>,
}

/// Collects named tensors and metadata, then serialises them.
#[derive(Debug, Clone, Default)]
pub struct ArchiveBuilder {
    entries: Vec<(String, DenseTensor)>,
    names: HashMap<String, usize>,
    metadata: Map<String, Value>,
}

impl ArchiveBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Result<&mut Self> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("tensor `{name}`")));
        }
        self.names.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(self)
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: Value) -> &mut Self {
        self.metadata.insert(key.into(), value);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut metas = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let nbytes = (t.len() * 4) as u64;
            metas.push(EntryMeta {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            entries: metas,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE as usize + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Write to `path` via a temporary sibling file and rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Write `entries` (unique names, finite data) to `path`.
pub fn write_archive(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (String, DenseTensor)>,
    metadata: Map<String, Value>,
) -> Result<()> {
    let mut b = ArchiveBuilder::new();
    for (name, t) in entries {
        b.add(name, t)?;
    }
    b.metadata = metadata;
    b.write(path)
}

/// A validated archive; tensors are decoded on demand.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    metadata: Map<String, Value>,
    entries: Vec<EntryMeta>,
    index: HashMap<String, usize>,
    payload: Vec<u8>,
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(bytes)
}

impl TensorArchive {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let file_len = bytes.len() as u64;
        if file_len < PREAMBLE {
            return Err(Error::Truncated {
                expected: PREAMBLE,
                actual: file_len,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Archive {
                position: 0,
                message: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = PREAMBLE.checked_add(hlen).ok_or(Error::Archive {
            position: 8,
            message: "header length overflows".into(),
        })?;
        if header_end > file_len {
            return Err(Error::Truncated {
                expected: header_end,
                actual: file_len,
            });
        }
        let header_bytes = &bytes[PREAMBLE as usize..header_end as usize];
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Archive {
            position: PREAMBLE + locate(header_bytes, e.line(), e.column()),
            message: format!("invalid header: {e}"),
        })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Archive {
                position: PREAMBLE,
                message: format!("unsupported version {} (expected {FORMAT_VERSION})", header.version),
            });
        }

        let payload_len = file_len - header_end;
        let mut index = HashMap::with_capacity(header.entries.len());
        let mut max_end = 0u64;
        for (i, e) in header.entries.iter().enumerate() {
            if e.dtype != "f32" {
                return Err(Error::Archive {
                    position: PREAMBLE,
                    message: format!("entry `{}` has unsupported dtype `{}`", e.name, e.dtype),
                });
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel as u64 * 4 {
                return Err(Error::Archive {
                    position: header_end + e.offset,
                    message: format!(
                        "entry `{}` declares {} bytes but shape {:?} needs {}",
                        e.name,
                        e.nbytes,
                        e.shape,
                        numel * 4
                    ),
                });
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            max_end = max_end.max(e.offset.saturating_add(e.nbytes));
        }
        if max_end > payload_len {
            return Err(Error::Truncated {
                expected: header_end + max_end,
                actual: file_len,
            });
        }
        let mut spans: Vec<&EntryMeta> = header.entries.iter().filter(|e| e.nbytes > 0).collect();
        spans.sort_by_key(|e| e.offset);
        for w in spans.windows(2) {
            if w[0].offset + w[0].nbytes > w[1].offset {
                return Err(Error::OverlappingEntries {
                    first: w[0].name.clone(),
                    second: w[1].name.clone(),
                    position: w[1].offset,
                });
            }
        }

        let payload = bytes[header_end as usize..].to_vec();
        Ok(Self {
            metadata: header.metadata,
            entries: header.entries,
            index,
            payload,
        })
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.metadata
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
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

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.meta(name).map(|e| e.shape.as_slice())
    }

    fn meta(&self, name: &str) -> Result<&EntryMeta> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Raw little-endian bytes of one entry.
    pub fn raw(&self, name: &str) -> Result<&[u8]> {
        let e = self.meta(name)?;
        Ok(&self.payload[e.offset as usize..(e.offset + e.nbytes) as usize])
    }

    pub fn get(&self, name: &str) -> Result<DenseTensor> {
        let e = self.meta(name)?;
        let data = self
            .raw(name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        DenseTensor::new(e.shape.clone(), data)
    }

    pub fn get_opt(&self, name: &str) -> Result<Option<DenseTensor>> {
        if self.contains(name) {
            self.get(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Copy everything into a builder (for rewriting with changes).
    pub fn to_builder(&self) -> Result<ArchiveBuilder> {
        let mut b = ArchiveBuilder::new();
        for e in &self.entries {
            b.add(e.name.clone(), self.get(&e.name)?)?;
        }
        b.metadata = self.metadata.clone();
        Ok(b)
    }
}

fn locate(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut cur_line = 1;
    for (i, &b) in bytes.iter().enumerate() {
        if cur_line == line {
            return (i + column.saturating_sub(1)) as u64;
        }
        if b == b'\n' {
            cur_line += 1;
        }
    }
    bytes.len() as u64
}
