//! Binary container shared by datasets, embedding caches, model files and
//! trainer checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    6 bytes  "DRRHO1"
//! version  u16
//! kind     u8       1 dataset, 2 cache, 3 model, 4 checkpoint
//! reserved u8       0
//! blocks   u32
//! per block:
//!   name_len u16, name (utf-8)
//!   dtype    u8     0 f64, 1 u64, 2 raw bytes
//!   rows     u64
//!   cols     u64
//!   payload  rows*cols elements, row-major (8 bytes each for f64/u64)
//! ```
//!
//! A JSON manifest is written next to the file (`<file>.json`). It carries the
//! SHA-256 of the full file plus the dims needed to cross-check the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DRRHO1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Dataset,
    Cache,
    Model,
    Checkpoint,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Dataset => 1,
            Kind::Cache => 2,
            Kind::Model => 3,
            Kind::Checkpoint => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Kind::Dataset),
            2 => Some(Kind::Cache),
            3 => Some(Kind::Model),
            4 => Some(Kind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F64 {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub data: BlockData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u16,
    pub kind: Kind,
    /// Row count of the primary payload (pairs for datasets and caches).
    pub n: u64,
    pub dims: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub checksum: String,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub blocks: Vec<Block>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Container {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            blocks: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: &str, m: &Array2<f64>) {
        let (rows, cols) = m.dim();
        self.blocks.push(Block {
            name: name.to_owned(),
            data: BlockData::F64 {
                rows,
                cols,
                values: m.iter().copied().collect(),
            },
        });
    }

    pub fn push_f64s(&mut self, name: &str, values: &[f64]) {
        self.blocks.push(Block {
            name: name.to_owned(),
            data: BlockData::F64 {
                rows: values.len(),
                cols: 1,
                values: values.to_vec(),
            },
        });
    }

    pub fn push_u64s(&mut self, name: &str, values: &[u64]) {
        self.blocks.push(Block {
            name: name.to_owned(),
            data: BlockData::U64(values.to_vec()),
        });
    }

    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.blocks.push(Block {
            name: name.to_owned(),
            data: BlockData::Bytes(bytes.to_vec()),
        });
    }

    fn block(&self, name: &str) -> Result<&BlockData> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.data)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        match self.block(name)? {
            BlockData::F64 { rows, cols, values } => {
                Array2::from_shape_vec((*rows, *cols), values.clone())
                    .map_err(|e| Error::Format(format!("block `{name}`: {e}")))
            }
            _ => Err(Error::Format(format!("block `{name}` is not f64"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        match self.block(name)? {
            BlockData::F64 { values, .. } => Ok(values.clone()),
            _ => Err(Error::Format(format!("block `{name}` is not f64"))),
        }
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        let v = self.f64s(name)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Format(format!("block `{name}` is not a scalar"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match self.block(name)? {
            BlockData::U64(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("block `{name}` is not u64"))),
        }
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.u64s(name)?.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Format(format!("block `{name}` is not a scalar"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        match self.block(name)? {
            BlockData::Bytes(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("block `{name}` is not raw bytes"))),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?)
            .map_err(|_| Error::Format(format!("block `{name}` is not utf-8")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(0);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for block in &self.blocks {
            out.extend_from_slice(&(block.name.len() as u16).to_le_bytes());
            out.extend_from_slice(block.name.as_bytes());
            match &block.data {
                BlockData::F64 { rows, cols, values } => {
                    out.push(0);
                    out.extend_from_slice(&(*rows as u64).to_le_bytes());
                    out.extend_from_slice(&(*cols as u64).to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                BlockData::U64(values) => {
                    out.push(1);
                    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                    out.extend_from_slice(&1u64.to_le_bytes());
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                BlockData::Bytes(bytes) => {
                    out.push(2);
                    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                    out.extend_from_slice(&1u64.to_le_bytes());
                    out.extend_from_slice(bytes);
                }
            }
        }
        out
    }

    /// Decode a full file image. Checks magic, version and structure; the
    /// checksum is verified separately against the manifest.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated(format!(
                "{} is {} bytes, shorter than the header",
                path.display(),
                bytes.len()
            )));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
            });
        }
        r.pos = MAGIC.len();
        let version = u16::from_le_bytes(r.take_array("version")?);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind_code = r.take_array::<1>("kind")?[0];
        let kind = Kind::from_code(kind_code)
            .ok_or_else(|| Error::Format(format!("unknown kind code {kind_code}")))?;
        let _reserved = r.take_array::<1>("reserved")?;
        let count = u32::from_le_bytes(r.take_array("block count")?);
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take_array("block name length")?) as usize;
            let name = std::str::from_utf8(r.take(name_len, "block name")?)
                .map_err(|_| Error::Format("block name is not utf-8".into()))?
                .to_owned();
            let dtype = r.take_array::<1>("dtype")?[0];
            let rows = u64::from_le_bytes(r.take_array("rows")?) as usize;
            let cols = u64::from_le_bytes(r.take_array("cols")?) as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("block `{name}` dims overflow")))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(count.saturating_mul(8), &name)?;
                    let values = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    BlockData::F64 { rows, cols, values }
                }
                1 => {
                    let raw = r.take(count.saturating_mul(8), &name)?;
                    BlockData::U64(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                            .collect(),
                    )
                }
                2 => BlockData::Bytes(r.take(count, &name)?.to_vec()),
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            blocks.push(Block { name, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { kind, blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated(format!(
                "needed {len} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn take_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

/// Fields of a manifest that the caller supplies; the checksum and sizes are
/// filled in on write.
#[derive(Debug, Clone, Default)]
pub struct ManifestFields {
    pub n: u64,
    pub dims: BTreeMap<String, u64>,
    pub seed: Option<u64>,
    pub source_id: Option<String>,
}

pub fn write(path: &Path, container: &Container, fields: ManifestFields) -> Result<Manifest> {
    let bytes = container.encode();
    let manifest = Manifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        version: VERSION,
        kind: container.kind,
        n: fields.n,
        dims: fields.dims,
        seed: fields.seed,
        source_id: fields.source_id,
        checksum: format!("sha256:{}", sha256_hex(&bytes)),
        payload_bytes: bytes.len() as u64,
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read(path: &Path, expected: Kind) -> Result<(Container, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::Format(format!("manifest {}: {e}", mpath.display())))?;
    if manifest.version != VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let container = Container::decode(&bytes, path)?;
    let found = format!("sha256:{}", sha256_hex(&bytes));
    if found != manifest.checksum {
        return Err(Error::Checksum {
            expected: manifest.checksum,
            found,
        });
    }
    if container.kind != expected || manifest.kind != expected {
        return Err(Error::Format(format!(
            "expected a {expected:?} file, found {:?} (manifest says {:?})",
            container.kind, manifest.kind
        )));
    }
    Ok((container, manifest))
}

pub(crate) fn dims<const N: usize>(pairs: [(&str, usize); N]) -> BTreeMap<String, u64> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v as u64))
        .collect()
}

pub(crate) fn check_dim(manifest: &Manifest, key: &str, actual: usize) -> Result<()> {
    match manifest.dims.get(key) {
        Some(&v) if v == actual as u64 => Ok(()),
        Some(&v) => Err(Error::Format(format!(
            "manifest {key} = {v} disagrees with payload ({actual})"
        ))),
        None => Err(Error::Format(format!("manifest lacks dim `{key}`"))),
    }
}

pub(crate) fn check_n(manifest: &Manifest, actual: usize) -> Result<()> {
    if manifest.n != actual as u64 {
        return Err(Error::Format(format!(
            "manifest n = {} disagrees with payload length {actual}",
            manifest.n
        )));
    }
    Ok(())
}
