//! Named-tensor checkpoint container with a JSON config sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"MDKC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub tensors: Vec<TensorInfo>,
    /// Free-form run metadata.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `model.mdkc` → `model.mdkc.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.iter() {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt {
                kind: "checkpoint",
                message: format!("truncated at byte {} (wanted {n} more)", self.pos),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a whole container; nothing is returned unless every tensor is intact.
pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let corrupt = |message: String| Error::Corrupt {
        kind: "checkpoint",
        message,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(format!("tensor {name:?} has unknown dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor {name:?} is too large")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("size overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(name.clone(), Tensor::new(shape, data)?, true)
            .map_err(|_| corrupt(format!("duplicate tensor {name:?}")))?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>, encoder: &EncoderConfig, extra: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sidecar = Sidecar {
        format_version: VERSION,
        encoder: encoder.clone(),
        tensors: store
            .iter()
            .map(|e| TensorInfo {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        extra,
    };
    fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Loads a container and its sidecar, checking they describe the same tensors.
pub fn load(path: &Path) -> Result<(ParamStore<f32>, Sidecar)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: side.clone(),
        source,
    })?;
    if sidecar.tensors.len() != store.len() {
        return Err(Error::Corrupt {
            kind: "checkpoint",
            message: format!(
                "sidecar lists {} tensors, container holds {}",
                sidecar.tensors.len(),
                store.len()
            ),
        });
    }
    for info in &sidecar.tensors {
        let found = store.get(&info.name)?.shape();
        if found != info.shape.as_slice() {
            return Err(Error::TensorShape {
                name: info.name.clone(),
                expected: info.shape.clone(),
                found: found.to_vec(),
            });
        }
    }
    Ok((store, sidecar))
}
