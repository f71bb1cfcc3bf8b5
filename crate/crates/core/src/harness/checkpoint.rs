//! Versioned binary checkpoints.
//!
//! Layout: the magic bytes, the container version (`u32` LE), the header
//! length (`u64` LE), a JSON header, raw little-endian tensor data in header
//! order, and a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::inference::MODEL_FORMAT_VERSION;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PRSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_BYTES: usize = 32;
const PREFIX_BYTES: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    model_version: u32,
    step: u64,
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorInfo>,
}

/// Named tensors plus JSON metadata for one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub model_version: u32,
    pub step: u64,
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<(TensorInfo, Vec<u8>)>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, step: u64) -> Self {
        Self {
            kind: kind.into(),
            model_version: MODEL_FORMAT_VERSION,
            step,
            meta: serde_json::Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta<S: Serialize>(&mut self, key: &str, value: &S) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<D: DeserializeOwned>(&self, key: &str) -> Result<D> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("no `{key}` entry in the {} checkpoint", self.kind)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(i, _)| i.name.as_str())
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, m: &Mat<T>) {
        let mut data = Vec::with_capacity(m.len() * T::BYTES);
        for &v in m.iter() {
            v.write_le(&mut data);
        }
        let info = TensorInfo {
            name: name.into(),
            dtype: T::DTYPE.into(),
            rows: m.nrows(),
            cols: m.ncols(),
        };
        self.tensors.push((info, data));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        let (info, data) = self
            .tensors
            .iter()
            .find(|(i, _)| i.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing from checkpoint")))?;
        if info.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {}, expected {}", info.dtype, T::DTYPE)));
        }
        let values: Vec<T> = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        Array2::from_shape_vec((info.rows, info.cols), values).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
    }

    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, m) in store.iter() {
            self.push(format!("{prefix}{name}"), m);
        }
    }

    /// Fills every parameter of `store` from tensors named `prefix + name`.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut loaded = Vec::new();
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            loaded.push((store.name(id).to_owned(), self.tensor::<T>(&name)?));
        }
        store.load_from(loaded.iter().map(|(n, m)| (n.as_str(), m)))
    }

    pub fn push_adam<T: Scalar>(&mut self, prefix: &str, opt: &Adam<T>) -> Result<()> {
        self.set_meta(&format!("{prefix}config"), &opt.config)?;
        self.set_meta(&format!("{prefix}step"), &opt.step)?;
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.push(format!("{prefix}m.{i}"), m);
            self.push(format!("{prefix}v.{i}"), v);
        }
        Ok(())
    }

    pub fn load_adam<T: Scalar>(&self, prefix: &str, opt: &mut Adam<T>) -> Result<()> {
        opt.config = self.meta(&format!("{prefix}config"))?;
        opt.step = self.meta(&format!("{prefix}step"))?;
        for i in 0..opt.m.len() {
            let (m, v) = (self.tensor::<T>(&format!("{prefix}m.{i}"))?, self.tensor::<T>(&format!("{prefix}v.{i}"))?);
            if m.dim() != opt.m[i].dim() || v.dim() != opt.v[i].dim() {
                return Err(Error::Checkpoint(format!("optimizer slot {prefix}{i} has the wrong shape")));
            }
            opt.m[i] = m;
            opt.v[i] = v;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            model_version: self.model_version,
            step: self.step,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(i, _)| i.clone()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.tensors {
            out.extend_from_slice(data);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a checkpoint, checking the digest before the versions so a
    /// damaged file is always reported as such.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_BYTES + DIGEST_BYTES || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint or truncated header".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_BYTES);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("digest mismatch; the file is truncated or corrupt".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: format!("container v{version}"),
                expected: format!("container v{CHECKPOINT_VERSION}"),
            });
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_BYTES
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header runs past the end of the file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_BYTES..header_end])?;
        if header.model_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: format!("model v{}", header.model_version),
                expected: format!("model v{MODEL_FORMAT_VERSION}"),
            });
        }
        let mut pos = header_end;
        let mut tensors = Vec::new();
        for info in header.tensors {
            let width = match info.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
            };
            let n = info.rows * info.cols * width;
            if pos + n > body.len() {
                return Err(Error::Integrity(format!("tensor `{}` runs past the end of the file", info.name)));
            }
            tensors.push((info, body[pos..pos + n].to_vec()));
            pos += n;
        }
        if pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - pos)));
        }
        Ok(Self {
            kind: header.kind,
            model_version: header.model_version,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so readers never see a partial
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and checks it holds the expected stage.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind)));
        }
        Ok(ck)
    }
}
