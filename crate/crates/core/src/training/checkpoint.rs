//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (version, step, stage, config snapshot, tensor table, SHA-256 of the data
//! section), then the tensors as little-endian `f32` in table order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::training::optim::AdamW;

pub const MAGIC: &[u8; 8] = b"MULTIID\0";
pub const VERSION: u32 = 1;
pub const OPTIM_M: &str = "optim.m.";
pub const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.clone(), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub step: usize,
    pub stage: u8,
    pub optimizer_step: usize,
    pub config: serde_json::Value,
    /// Parameters by dotted name, then optimizer moments under
    /// `optim.m.*` / `optim.v.*`.
    pub tensors: BTreeMap<String, NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: usize,
    stage: u8,
    optimizer_step: usize,
    config: serde_json::Value,
    tensors: Vec<TableEntry>,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointBundle {
    pub fn from_state(
        store: &ParamStore,
        optimizer: Option<&AdamW>,
        step: usize,
        stage: u8,
        config: serde_json::Value,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in store.iter() {
            tensors.insert(name.clone(), NamedArray::from_tensor(var.as_tensor())?);
        }
        if let Some(opt) = optimizer {
            for (name, m) in &opt.m {
                tensors.insert(format!("{OPTIM_M}{name}"), NamedArray::from_tensor(m)?);
            }
            for (name, v) in &opt.v {
                tensors.insert(format!("{OPTIM_V}{name}"), NamedArray::from_tensor(v)?);
            }
        }
        Ok(Self {
            step,
            stage,
            optimizer_step: optimizer.map_or(0, |o| o.step),
            config,
            tensors,
        })
    }

    /// Parameter entries only.
    pub fn params(&self) -> impl Iterator<Item = (&String, &NamedArray)> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_M) && !k.starts_with(OPTIM_V))
    }

    /// A parameter store holding this bundle's parameters.
    pub fn to_store(&self, dtype: DType, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(dtype, seed);
        for (name, arr) in self.params() {
            store.insert(name, &arr.to_tensor(dtype)?)?;
        }
        Ok(store)
    }

    /// Restores optimizer moments saved alongside the parameters.
    pub fn restore_optimizer(&self, opt: &mut AdamW, dtype: DType) -> Result<()> {
        opt.step = self.optimizer_step;
        for (k, arr) in &self.tensors {
            if let Some(name) = k.strip_prefix(OPTIM_M) {
                opt.m.insert(name.to_string(), arr.to_tensor(dtype)?);
            } else if let Some(name) = k.strip_prefix(OPTIM_V) {
                opt.v.insert(name.to_string(), arr.to_tensor(dtype)?);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut table = Vec::with_capacity(self.tensors.len());
        for (name, arr) in &self.tensors {
            if arr.shape.iter().product::<usize>() != arr.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor `{name}` has {} values for shape {:?}",
                    arr.data.len(),
                    arr.shape
                )));
            }
            table.push(TableEntry {
                name: name.clone(),
                shape: arr.shape.clone(),
                offset: data.len(),
            });
            for v in &arr.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: VERSION,
            step: self.step,
            stage: self.stage,
            optimizer_step: self.optimizer_step,
            config: self.config.clone(),
            tensors: table,
            sha256: hex(&Sha256::digest(&data)),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + hjson.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptFile(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::VersionMismatch {
                found: header.version,
                expected: VERSION,
            });
        }
        let data = &bytes[hend..];
        if hex(&Sha256::digest(data)) != header.sha256 {
            return Err(corrupt("checksum mismatch"));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(Error::CorruptFile(format!("tensor `{}` runs past end of file", e.name)));
            }
            let values = data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                e.name,
                NamedArray {
                    shape: e.shape,
                    data: values,
                },
            );
        }
        Ok(Self {
            step: header.step,
            stage: header.stage,
            optimizer_step: header.optimizer_step,
            config: header.config,
            tensors,
        })
    }
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bundle.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    CheckpointBundle::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
