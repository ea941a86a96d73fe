//! Versioned binary container: JSON header, `f64` payload, SHA-256 trailer.
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `ARBORTN\0` |
//! | 8 | 4 | format version, `u32` little-endian |
//! | 12 | 8 | header length `h`, `u64` little-endian |
//! | 20 | `h` | header, UTF-8 JSON |
//! | 20 + `h` | `8·p` | payload, `p` little-endian `f64` values |
//! | end − 32 | 32 | SHA-256 of every preceding byte |
//!
//! The header lists the payload arrays by name and shape in storage order;
//! `p` is the sum of their element counts.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"ARBORTN\0";
pub const VERSION: u32 = 1;
const PREFIX: usize = 20;
const CHECKSUM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub created_by: String,
    pub arrays: Vec<ArraySpec>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    data: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            header: Header {
                kind: kind.to_string(),
                created_by: format!("arbor {}", env!("CARGO_PKG_VERSION")),
                arrays: Vec::new(),
                meta: serde_json::Value::Object(Default::default()),
            },
            data: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    /// Set a top-level metadata field.
    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(m) = &mut self.header.meta {
            m.insert(key.to_string(), value);
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let spec = ArraySpec { name: name.into(), shape };
        assert_eq!(spec.len(), data.len(), "array '{}' shape does not match its data", spec.name);
        self.header.arrays.push(spec);
        self.data.push(data);
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let i = self
            .header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Usage(format!("container has no array '{name}'")))?;
        Ok((&self.header.arrays[i].shape, &self.data[i]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + 8 * payload + CHECKSUM);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.data.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (header, start) = parse_prefix(path, bytes)?;
        let corrupt = |message: String| Error::Corrupt { path: path.to_path_buf(), message };
        let total: usize = header.arrays.iter().map(ArraySpec::len).sum();
        let expected = start + 8 * total + CHECKSUM;
        if bytes.len() != expected {
            return Err(corrupt(format!("file has {} bytes, header declares {}", bytes.len(), expected)));
        }
        let body = &bytes[..expected - CHECKSUM];
        if Sha256::digest(body).as_slice() != &bytes[expected - CHECKSUM..] {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut data = Vec::with_capacity(header.arrays.len());
        let mut pos = start;
        for a in &header.arrays {
            let n = a.len();
            let values = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            data.push(values);
        }
        Ok(Self { header, data })
    }

    /// Write atomically: a temporary file in the target directory renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

fn parse_prefix(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let format = |offset: u64, message: String| Error::Format { path: path.to_path_buf(), offset, message };
    if bytes.len() < PREFIX {
        if bytes.len() >= 8 && bytes[..8] != MAGIC {
            return Err(format(0, "not an arbor container".into()));
        }
        return Err(Error::Corrupt { path: path.to_path_buf(), message: format!("only {} bytes", bytes.len()) });
    }
    if bytes[..8] != MAGIC {
        return Err(format(0, "not an arbor container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format(8, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = PREFIX.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Corrupt {
        path: path.to_path_buf(),
        message: format!("header of {hlen} bytes runs past the end of the file"),
    })?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..end]).map_err(|e| format(PREFIX as u64, format!("bad header: {e}")))?;
    Ok((header, end))
}

/// Read only the header, leaving the payload unread and unchecked.
pub fn inspect(path: &Path) -> Result<Header> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = [0u8; PREFIX];
    let got = read_up_to(&mut f, &mut prefix).map_err(|e| Error::io(path, e))?;
    if got < PREFIX {
        return parse_prefix(path, &prefix[..got]).map(|(h, _)| h);
    }
    let hlen = u64::from_le_bytes(prefix[12..20].try_into().unwrap()) as usize;
    if prefix[..8] != MAGIC || hlen > (1 << 30) {
        return parse_prefix(path, &prefix).map(|(h, _)| h);
    }
    let mut buf = prefix.to_vec();
    buf.resize(PREFIX + hlen, 0);
    let got = read_up_to(&mut f, &mut buf[PREFIX..]).map_err(|e| Error::io(path, e))?;
    buf.truncate(PREFIX + got);
    parse_prefix(path, &buf).map(|(h, _)| h)
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}
