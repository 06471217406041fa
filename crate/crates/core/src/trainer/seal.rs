//! Sealed per-virtual-batch gradients and their large-batch aggregation.
//!
//! A sealed gradient is a serialized blob plus a SHA-256 checksum; it stands in
//! for an encrypted eviction from enclave memory. Floats are stored as raw bit
//! patterns so the roundtrip is exact.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gradients, LayerGrad, TrainError};
use crate::quant::RealTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedGradient {
    pub index: usize,
    pub blob: Vec<u8>,
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    bits: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    w: RawTensor,
    b: Option<RawTensor>,
}

fn raw(t: &RealTensor) -> RawTensor {
    RawTensor {
        rows: t.nrows(),
        cols: t.ncols(),
        bits: t.iter().map(|v| v.to_bits()).collect(),
    }
}

fn cooked(r: RawTensor) -> Result<RealTensor, TrainError> {
    Array2::from_shape_vec(
        (r.rows, r.cols),
        r.bits.into_iter().map(f64::from_bits).collect(),
    )
    .map_err(|e| TrainError::Blob(e.to_string()))
}

fn digest(blob: &[u8]) -> String {
    hex::encode(Sha256::digest(blob))
}

pub fn seal_gradient(g: &Gradients, index: usize) -> SealedGradient {
    let layers: Vec<Option<RawLayer>> = g
        .layers
        .iter()
        .map(|l| {
            l.as_ref().map(|l| RawLayer {
                w: raw(&l.w),
                b: l.b.as_ref().map(raw),
            })
        })
        .collect();
    let blob = serde_json::to_vec(&layers).expect("gradients serialize");
    SealedGradient {
        index,
        checksum: digest(&blob),
        blob,
    }
}

pub fn unseal_gradient(s: &SealedGradient) -> Result<Gradients, TrainError> {
    if digest(&s.blob) != s.checksum {
        return Err(TrainError::ChecksumMismatch { index: s.index });
    }
    let layers: Vec<Option<RawLayer>> =
        serde_json::from_slice(&s.blob).map_err(|e| TrainError::Blob(e.to_string()))?;
    let layers = layers
        .into_iter()
        .map(|l| {
            l.map(|l| {
                Ok(LayerGrad {
                    w: cooked(l.w)?,
                    b: l.b.map(cooked).transpose()?,
                })
            })
            .transpose()
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(Gradients { layers })
}

/// Where sealed gradients wait until the large batch is complete.
#[derive(Debug)]
pub enum SealStore {
    Memory(HashMap<usize, Vec<u8>>),
    Dir(PathBuf),
}

impl SealStore {
    pub fn memory() -> Self {
        SealStore::Memory(HashMap::new())
    }

    pub fn dir<P: AsRef<Path>>(path: P) -> Result<Self, TrainError> {
        std::fs::create_dir_all(path.as_ref())?;
        Ok(SealStore::Dir(path.as_ref().to_path_buf()))
    }

    fn path(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("vb_{index:05}.sealed.json"))
    }

    /// Writes the sealed gradient out of coordinator memory.
    pub fn evict(&mut self, s: &SealedGradient) -> Result<(), TrainError> {
        let bytes = serde_json::to_vec(s).map_err(|e| TrainError::Blob(e.to_string()))?;
        match self {
            SealStore::Memory(m) => {
                m.insert(s.index, bytes);
            }
            SealStore::Dir(d) => std::fs::write(Self::path(d, s.index), bytes)?,
        }
        Ok(())
    }

    /// Reads a sealed gradient back; `MissingBatch` if it was never evicted.
    pub fn reload(&self, index: usize) -> Result<SealedGradient, TrainError> {
        let bytes = match self {
            SealStore::Memory(m) => m
                .get(&index)
                .cloned()
                .ok_or(TrainError::MissingBatch(index))?,
            SealStore::Dir(d) => match std::fs::read(Self::path(d, index)) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(TrainError::MissingBatch(index))
                }
                Err(e) => return Err(e.into()),
            },
        };
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Blob(e.to_string()))
    }

    /// Reloads virtual batches `0..count`.
    pub fn reload_all(&self, count: usize) -> Result<Vec<SealedGradient>, TrainError> {
        (0..count).map(|i| self.reload(i)).collect()
    }

    pub fn clear(&mut self) -> Result<(), TrainError> {
        match self {
            SealStore::Memory(m) => m.clear(),
            SealStore::Dir(d) => {
                for entry in std::fs::read_dir(&*d)? {
                    let path = entry?.path();
                    if path.to_string_lossy().ends_with(".sealed.json") {
                        std::fs::remove_file(path)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Elementwise mean of the sealed virtual-batch gradients `0..expected`.
pub fn update_aggregation(
    sealed: &[SealedGradient],
    expected: usize,
) -> Result<Gradients, TrainError> {
    let by_index: BTreeMap<usize, &SealedGradient> = sealed.iter().map(|s| (s.index, s)).collect();
    if expected == 0 {
        return Err(TrainError::MissingBatch(0));
    }
    let mut parts = Vec::with_capacity(expected);
    for i in 0..expected {
        let s = by_index.get(&i).ok_or(TrainError::MissingBatch(i))?;
        parts.push(unseal_gradient(s)?);
    }
    let shapes_match = parts.iter().all(|g| {
        g.layers.len() == parts[0].layers.len()
            && g.layers
                .iter()
                .zip(&parts[0].layers)
                .all(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => {
                        a.w.dim() == b.w.dim()
                            && a.b.as_ref().map(|t| t.dim()) == b.b.as_ref().map(|t| t.dim())
                    }
                    (None, None) => true,
                    _ => false,
                })
    });
    if !shapes_match {
        return Err(TrainError::Blob(
            "virtual-batch gradients have different shapes".into(),
        ));
    }
    Ok(super::plain::mean_gradients(&parts))
}
