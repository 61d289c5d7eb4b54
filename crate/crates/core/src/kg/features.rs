use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MDKF";
const VERSION: u32 = 1;

/// Seeded feature hashing: lowercase whitespace tokens, bucket `h mod dim`,
/// sign from the top hash bit, then L2 normalization. Text without tokens
/// yields the zero vector.
pub fn hash_featurize(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 1, "feature dimension must be positive");
    let mut acc = vec![0f64; dim];
    for tok in text.to_lowercase().split_whitespace() {
        let h = xxh3_64_with_seed(tok.as_bytes(), seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % dim as u64) as usize] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Frozen per-entity input features. There is no mutable access to rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTable {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "feature data of length {} is not a whole number of {dim}-dim rows",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature table contains non-finite values".into()));
        }
        Ok(FeatureTable { dim, data })
    }

    /// Zero table; the allocation is lazily backed, so very large tables cost
    /// nothing until touched.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        FeatureTable {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Hashes each entity's surface text.
    pub fn hashed<S: AsRef<str>>(texts: &[S], dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(texts.len() * dim);
        for t in texts {
            data.extend(hash_featurize(t.as_ref(), dim, seed));
        }
        FeatureTable { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Stacks the selected rows; `None` gives a zero row.
    pub fn gather<T: Real>(&self, idx: &[Option<usize>]) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); idx.len() * self.dim];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= self.rows() {
                    return Err(Error::shape(
                        "feature_gather",
                        format!("row {i} out of range for {} rows", self.rows()),
                    ));
                }
                for (o, &v) in out[r * self.dim..(r + 1) * self.dim].iter_mut().zip(self.row(i)) {
                    *o = T::of(v as f64);
                }
            }
        }
        Tensor::new(vec![idx.len(), self.dim], out)
    }

    /// In-process checksum over the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        for v in &self.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_row_file(MAGIC, self.rows(), self.dim, &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (rows, dim, data) = read_row_file(bytes, MAGIC, "feature")?;
        let table = FeatureTable::new(dim, data)?;
        debug_assert_eq!(table.rows(), rows);
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses the shared `magic, u32 version, u64 rows, u32 dim, f32 rows` layout.
pub(crate) fn read_row_file(bytes: &[u8], magic: &[u8; 4], kind: &'static str) -> Result<(usize, usize, Vec<f32>)> {
    let corrupt = |message: String| Error::Corrupt { kind, message };
    if bytes.len() < 20 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expect = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("row count overflows".into()))?;
    let body = &bytes[20..];
    if body.len() != expect {
        return Err(corrupt(format!(
            "expected {expect} payload bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

pub(crate) fn write_row_file(magic: &[u8; 4], rows: usize, dim: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + data.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
