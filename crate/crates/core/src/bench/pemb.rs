//! PEMB embedding files: `"PEMB"`, version `u32 = 1`, count `u64`, dim
//! `u32`, `count` labels as `u32`, then the `count x dim` values as
//! row-major `f32`. Everything little-endian. A JSON sidecar next to the
//! file maps label ids to class names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{put_u32, put_u64, Reader};
use crate::embedding::Embedding;
use crate::error::{contract, Error, Result};
use crate::percept::{AfcLabel, EmbeddedTriplet};
use crate::retrieval::RetrievalPool;

pub const PEMB_MAGIC: &[u8; 4] = b"PEMB";
pub const PEMB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Rows kept as `f32` so a read followed by a write reproduces the input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    labels: Vec<u32>,
    values: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(dim: usize, labels: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if labels.len().checked_mul(dim) != Some(values.len()) {
            return contract(format!(
                "{} labels of dimension {dim} need {} values, got {}",
                labels.len(),
                labels.len().saturating_mul(dim),
                values.len()
            ));
        }
        if dim > u32::MAX as usize {
            return contract(format!("dimension {dim} does not fit the header"));
        }
        if dim == 0 && !labels.is_empty() {
            return contract("rows of dimension zero");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return contract("embedding values must be finite");
        }
        Ok(Self { dim, labels, values })
    }

    /// Rounds to `f32`; values outside its range are rejected.
    pub fn from_embeddings(embeddings: &[Embedding], labels: &[usize]) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return contract(format!("{} embeddings but {} labels", embeddings.len(), labels.len()));
        }
        let dim = embeddings.first().map_or(0, Embedding::dim);
        if embeddings.iter().any(|e| e.dim() != dim) {
            return contract("embeddings differ in dimension");
        }
        let labels = labels
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| Error::Contract(format!("label {l} exceeds u32"))))
            .collect::<Result<_>>()?;
        let values = embeddings.iter().flat_map(|e| e.values().iter().map(|&v| v as f32)).collect();
        Self::new(dim, labels, values)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        (0..self.len())
            .map(|i| Embedding::new(self.row(i).iter().map(|&v| f64::from(v)).collect()))
            .collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.labels.len() + self.values.len()));
        out.extend_from_slice(PEMB_MAGIC);
        put_u32(&mut out, PEMB_VERSION);
        put_u64(&mut out, self.labels.len() as u64);
        put_u32(&mut out, self.dim as u32);
        self.labels.iter().for_each(|&l| put_u32(&mut out, l));
        self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != PEMB_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "not a PEMB file".into(),
            });
        }
        let version_at = r.offset();
        let version = r.u32("version")?;
        if version != PEMB_VERSION {
            return Err(Error::Format {
                offset: version_at,
                reason: format!("unsupported PEMB version {version}"),
            });
        }
        let count_at = r.offset();
        let count = r.u64("count")?;
        let dim = r.u32("dim")? as usize;
        let overflow = || Error::Format {
            offset: count_at,
            reason: format!("{count} rows of dimension {dim} overflow"),
        };
        let n = usize::try_from(count).map_err(|_| overflow())?;
        let cells = n.checked_mul(dim).ok_or_else(overflow)?;
        // labels plus values, checked against the bytes actually present
        let body = n
            .checked_add(cells)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(overflow)?;
        if body > r.remaining() {
            return r.fail(format!(
                "truncated: header promises {body} bytes of rows, {} left",
                r.remaining()
            ));
        }
        if dim == 0 && n > 0 {
            return Err(Error::Format {
                offset: count_at + 8,
                reason: "rows of dimension zero".into(),
            });
        }
        let labels = (0..n).map(|_| r.u32("label")).collect::<Result<Vec<_>>>()?;
        let values_at = r.offset();
        let values = r.f32s(cells, "values")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: values_at + 4 * i as u64,
                reason: "non-finite value".into(),
            });
        }
        r.finish()?;
        Ok(Self { dim, labels, values })
    }
}

/// Writes via a temporary file and a rename.
pub fn pemb_write(path: &Path, file: &EmbeddingFile) -> Result<()> {
    let tmp = path.with_extension("pemb.tmp");
    std::fs::write(&tmp, file.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn pemb_read(path: &Path) -> Result<EmbeddingFile> {
    EmbeddingFile::from_bytes(&std::fs::read(path)?)
}

/// Metadata stored beside a PEMB file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sidecar {
    /// Name of label id `i` at index `i`.
    pub class_names: Vec<String>,
    pub model: Option<String>,
    pub preprocessing: Option<String>,
    /// Inputs that could not be embedded.
    pub skipped: Vec<String>,
}

impl Sidecar {
    pub fn with_classes(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            ..Self::default()
        }
    }
}

/// `embeddings.pemb` pairs with `embeddings.json`.
pub fn sidecar_path(pemb: &Path) -> PathBuf {
    pemb.with_extension("json")
}

pub fn write_sidecar(pemb: &Path, sidecar: &Sidecar) -> Result<()> {
    std::fs::write(sidecar_path(pemb), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(pemb: &Path) -> Result<Sidecar> {
    Ok(serde_json::from_str(&std::fs::read_to_string(sidecar_path(pemb))?)?)
}

/// A retrieval pool from a PEMB file and its sidecar.
pub fn load_pool(pemb: &Path) -> Result<RetrievalPool> {
    let file = pemb_read(pemb)?;
    let sidecar = read_sidecar(pemb)?;
    RetrievalPool::new(file.embeddings(), file.labels_usize(), sidecar.class_names)
}

/// Labels of an exported 2AFC set, `1` or `2` per triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletLabels {
    pub labels: Vec<u8>,
}

/// Joins three aligned PEMB files (reference, first, second) with their
/// labels into triplets for the embedding-input 2AFC path.
pub fn load_2afc(reference: &Path, first: &Path, second: &Path, labels: &Path) -> Result<Vec<EmbeddedTriplet>> {
    let r = pemb_read(reference)?.embeddings();
    let a = pemb_read(first)?.embeddings();
    let b = pemb_read(second)?.embeddings();
    let l: TripletLabels = serde_json::from_str(&std::fs::read_to_string(labels)?)?;
    if a.len() != r.len() || b.len() != r.len() || l.labels.len() != r.len() {
        return contract(format!(
            "misaligned 2AFC exports: {} refs, {} first, {} second, {} labels",
            r.len(),
            a.len(),
            b.len(),
            l.labels.len()
        ));
    }
    r.into_iter()
        .zip(a)
        .zip(b)
        .zip(l.labels)
        .map(|(((reference, first), second), label)| {
            let label = AfcLabel::from_index(label)?;
            Ok(EmbeddedTriplet {
                reference,
                first,
                second,
                label,
            })
        })
        .collect()
}
