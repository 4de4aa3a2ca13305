//! The `WEMC` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "WEMC"
//! version    u32      FORMAT_VERSION
//! count      u32      number of tensors
//! per tensor (sorted by name):
//!   name_len u16, name (UTF-8)
//!   dtype    u8       0=f32, 1=f64, 2=sparse-f32, 3=sparse-f64
//!   rank     u8, dims u32 × rank
//!   payload  dense:  values × prod(dims)
//!            sparse: nnz u64, indices u32 × nnz, values × nnz
//! manifest   u32 length, UTF-8 `key=value` lines, u32 length (trailer)
//! ```
//!
//! The trailing copy of the manifest length lets tools read metadata from
//! the end of the file without walking the tensor records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scalar::Real;
use crate::sparse::SparseTensor;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WEMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"WEMC\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: String },

    #[error("unknown dtype code {code} for tensor `{tensor}`")]
    BadDtype { code: u8, tensor: String },

    #[error("invalid record `{tensor}`: {reason}")]
    Invalid { tensor: String, reason: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Record<T> {
    Dense(Tensor<T>),
    Sparse(SparseTensor<T>),
}

impl<T: Real> Record<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Record::Dense(t) => t.shape(),
            Record::Sparse(s) => s.shape(),
        }
    }

    pub fn as_dense(&self) -> Option<&Tensor<T>> {
        match self {
            Record::Dense(t) => Some(t),
            Record::Sparse(_) => None,
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        match self {
            Record::Dense(t) => t.clone(),
            Record::Sparse(s) => s.to_dense(),
        }
    }
}

/// Ordered `key=value` metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CheckpointError> {
        self.get(key)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing key `{key}`")))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V, CheckpointError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| CheckpointError::Manifest(format!("cannot parse `{key}={raw}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut m = Manifest::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Manifest(format!("line without `=`: {line:?}")))?;
            m.entries.insert(k.to_string(), v.to_string());
        }
        Ok(m)
    }
}

/// In-memory checkpoint: named records plus a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Record<T>>,
    pub manifest: Manifest,
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            manifest: Manifest::new(),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_dense(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), Record::Dense(t));
    }

    pub fn insert_sparse(&mut self, name: impl Into<String>, s: SparseTensor<T>) {
        self.tensors.insert(name.into(), Record::Sparse(s));
    }

    pub fn dense(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        match self.tensors.get(name) {
            Some(Record::Dense(t)) => Ok(t),
            Some(Record::Sparse(_)) => Err(CheckpointError::Invalid {
                tensor: name.to_string(),
                reason: "expected a dense tensor".into(),
            }),
            None => Err(CheckpointError::Invalid {
                tensor: name.to_string(),
                reason: "missing".into(),
            }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, record) in &self.tensors {
            let invalid = |reason: &str| CheckpointError::Invalid {
                tensor: name.clone(),
                reason: reason.to_string(),
            };
            let name_len = u16::try_from(name.len()).map_err(|_| invalid("name longer than 65535 bytes"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (code, shape) = match record {
                Record::Dense(t) => (T::DENSE_CODE, t.shape()),
                Record::Sparse(s) => (T::SPARSE_CODE, s.shape()),
            };
            out.push(code);
            let rank = u8::try_from(shape.len()).map_err(|_| invalid("rank above 255"))?;
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| invalid("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match record {
                Record::Dense(t) => {
                    out.reserve(t.len() * T::BYTES);
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
                Record::Sparse(s) => {
                    out.extend_from_slice(&(s.nnz() as u64).to_le_bytes());
                    for &i in s.indices() {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                    for &v in s.values() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        let text = self.manifest.to_text();
        let len = u32::try_from(text.len()).map_err(|_| CheckpointError::Manifest("manifest too large".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u16(&format!("name length of tensor #{i}"))? as usize;
            let name_bytes = r.take(name_len, &format!("name of tensor #{i}"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Invalid {
                    tensor: format!("#{i}"),
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let code = r.u8(&name)?;
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let invalid = |reason: String| CheckpointError::Invalid {
                tensor: name.clone(),
                reason,
            };
            if shape.contains(&0) {
                return Err(invalid(format!("zero dimension in {shape:?}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| invalid("element count overflows".into()))?;
            let record = match code {
                0 => Record::Dense(read_dense::<f32, T>(&mut r, &name, shape, numel)?),
                1 => Record::Dense(read_dense::<f64, T>(&mut r, &name, shape, numel)?),
                2 => Record::Sparse(read_sparse::<f32, T>(&mut r, &name, shape, numel)?),
                3 => Record::Sparse(read_sparse::<f64, T>(&mut r, &name, shape, numel)?),
                other => {
                    return Err(CheckpointError::BadDtype {
                        code: other,
                        tensor: name,
                    })
                }
            };
            if tensors.insert(name.clone(), record).is_some() {
                return Err(CheckpointError::Invalid {
                    tensor: name,
                    reason: "duplicate name".into(),
                });
            }
        }
        let len = r.u32("manifest length")? as usize;
        let text = r.take(len, "manifest")?;
        let text = std::str::from_utf8(text).map_err(|_| CheckpointError::Manifest("manifest is not UTF-8".into()))?;
        let manifest = Manifest::from_text(text)?;
        let trailer = r.u32("manifest trailer")? as usize;
        if trailer != len {
            return Err(CheckpointError::Manifest(format!(
                "trailer length {trailer} disagrees with prefix {len}"
            )));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Manifest(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors, manifest })
    }

    /// Writes atomically (temp file + rename); returns the byte count.
    pub fn write(&self, path: &Path) -> Result<usize, CheckpointError> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Reads only the manifest, using the length trailer at the end of the file.
pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes.iter().take(4).copied().collect(),
        });
    }
    let n = bytes.len();
    let len = u32::from_le_bytes([bytes[n - 4], bytes[n - 3], bytes[n - 2], bytes[n - 1]]) as usize;
    let start = n
        .checked_sub(4 + len)
        .ok_or_else(|| CheckpointError::Truncated {
            context: "manifest".into(),
        })?;
    let text = std::str::from_utf8(&bytes[start..n - 4]).map_err(|_| CheckpointError::Manifest("manifest is not UTF-8".into()))?;
    Manifest::from_text(text)
}

/// Temp-file-and-rename write so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, context)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

fn read_dense<S: Real, T: Real>(
    r: &mut Reader<'_>,
    name: &str,
    shape: Vec<usize>,
    numel: usize,
) -> Result<Tensor<T>, CheckpointError> {
    let nbytes = numel.checked_mul(S::BYTES).ok_or_else(|| CheckpointError::Truncated {
        context: format!("tensor `{name}`"),
    })?;
    let raw = r.take(nbytes, &format!("tensor `{name}`"))?;
    let data = raw.chunks_exact(S::BYTES).map(|c| T::lit(S::read_le(c).as_f64())).collect();
    Tensor::new(shape, data).map_err(|e| CheckpointError::Invalid {
        tensor: name.to_string(),
        reason: e.to_string(),
    })
}

fn read_sparse<S: Real, T: Real>(
    r: &mut Reader<'_>,
    name: &str,
    shape: Vec<usize>,
    numel: usize,
) -> Result<SparseTensor<T>, CheckpointError> {
    let ctx = format!("tensor `{name}`");
    let nnz = r.u64(&ctx)?;
    let nnz = usize::try_from(nnz)
        .ok()
        .filter(|&n| n <= numel)
        .ok_or_else(|| CheckpointError::Invalid {
            tensor: name.to_string(),
            reason: format!("nnz {nnz} exceeds dense size {numel}"),
        })?;
    let per = 4 + S::BYTES;
    if nnz.saturating_mul(per) > r.remaining() {
        return Err(CheckpointError::Truncated { context: ctx });
    }
    let idx_raw = r.take(nnz * 4, &ctx)?;
    let indices = idx_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let val_raw = r.take(nnz * S::BYTES, &ctx)?;
    let values = val_raw.chunks_exact(S::BYTES).map(|c| T::lit(S::read_le(c).as_f64())).collect();
    SparseTensor::new(shape, indices, values).map_err(|e| CheckpointError::Invalid {
        tensor: name.to_string(),
        reason: e.to_string(),
    })
}
