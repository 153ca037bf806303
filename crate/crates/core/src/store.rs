//! On-disk artifacts: embedding tables and parameter checkpoints.
//!
//! Embedding files are one line of JSON header followed by little-endian
//! `f32` values in row-major order. Checkpoints are pretty-printed JSON whose
//! floats round-trip exactly, so load-then-save reproduces the same bytes.
//! Every write goes to a temporary sibling first and is renamed into place.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FrozenEncoder, Modality};
use crate::data::ItemCatalog;
use crate::error::{Result, SdaError};
use crate::moda::AdapterSet;
use crate::numerics::{Matrix, ParamSet};

pub const EMBEDDING_FORMAT: &str = "sda-embeddings";
pub const EMBEDDING_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "sda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the resolved configuration that produced the artifact.
    pub config_hash: String,
    pub seed: u64,
    /// Hash of the adapter checkpoint used, empty when none.
    pub checkpoint_id: String,
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Writes `bytes` to a temporary sibling, syncs it and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SdaError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(|e| SdaError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SdaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SdaError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SdaError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub item_ids: Vec<String>,
    pub modality: Modality,
    /// One row per item; values are exactly representable as `f32`.
    pub matrix: Matrix,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    format: String,
    version: u32,
    modality: Modality,
    rows: usize,
    dim: usize,
    item_ids: Vec<String>,
    provenance: Provenance,
}

impl EmbeddingTable {
    /// Rounds `matrix` to `f32` precision so the stored and in-memory values
    /// agree bit for bit.
    pub fn new(item_ids: Vec<String>, modality: Modality, matrix: Matrix, provenance: Provenance) -> Result<Self> {
        if item_ids.len() != matrix.rows() {
            return Err(SdaError::Shape(format!(
                "{} item ids for {} embedding rows",
                item_ids.len(),
                matrix.rows()
            )));
        }
        Ok(Self {
            item_ids,
            modality,
            matrix: matrix.map(|v| v as f32 as f64),
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = EmbeddingHeader {
            format: EMBEDDING_FORMAT.into(),
            version: EMBEDDING_VERSION,
            modality: self.modality,
            rows: self.matrix.rows(),
            dim: self.matrix.cols(),
            item_ids: self.item_ids.clone(),
            provenance: self.provenance.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.matrix.len() * 4);
        for v in self.matrix.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| SdaError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing header terminator".into()))?;
        let header: EmbeddingHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        if header.format != EMBEDDING_FORMAT {
            return Err(corrupt(format!("unexpected format tag `{}`", header.format)));
        }
        if header.version != EMBEDDING_VERSION {
            return Err(SdaError::Version {
                found: header.version,
                expected: EMBEDDING_VERSION,
            });
        }
        if header.item_ids.len() != header.rows {
            return Err(corrupt(format!(
                "header lists {} item ids for {} rows",
                header.item_ids.len(),
                header.rows
            )));
        }
        let body = &bytes[nl + 1..];
        let want = header.rows * header.dim * 4;
        if body.len() != want {
            return Err(corrupt(format!(
                "payload is {} bytes, header implies {want} ({} x {} f32)",
                body.len(),
                header.rows,
                header.dim
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            item_ids: header.item_ids,
            modality: header.modality,
            matrix: Matrix::from_vec(header.rows, header.dim, data)?,
            provenance: header.provenance,
        })
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    write_atomic(path, &table.to_bytes()?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| SdaError::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes, path)
}

/// Embeddings of every catalog item for one modality, in catalog order.
pub fn embed_modality(
    catalog: &ItemCatalog,
    encoder: &FrozenEncoder,
    adapters: Option<&AdapterSet>,
    modality: Modality,
    parallel: bool,
) -> Result<Matrix> {
    let encode = |i: usize| {
        let item = catalog.get(i);
        let tokens = match modality {
            Modality::Text => &item.text_features,
            Modality::Image => &item.image_features,
        };
        encoder.encode(tokens, modality, adapters)
    };
    let rows: Vec<Vec<f64>> = if parallel {
        (0..catalog.len()).into_par_iter().map(encode).collect::<Result<_>>()?
    } else {
        (0..catalog.len()).map(encode).collect::<Result<_>>()?
    };
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, encoder.embed_dim()));
    }
    Matrix::from_rows(&rows)
}

/// Text and image tables for the whole catalog.
pub fn embed_catalog(
    catalog: &ItemCatalog,
    encoder: &FrozenEncoder,
    adapters: Option<&AdapterSet>,
    provenance: &Provenance,
    parallel: bool,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let ids = catalog.item_ids();
    let text = embed_modality(catalog, encoder, adapters, Modality::Text, parallel)?;
    let image = embed_modality(catalog, encoder, adapters, Modality::Image, parallel)?;
    Ok((
        EmbeddingTable::new(ids.clone(), Modality::Text, text, provenance.clone())?,
        EmbeddingTable::new(ids, Modality::Image, image, provenance.clone())?,
    ))
}

/// Named parameter blobs plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// What the parameters belong to, e.g. `adapters` or `seq`.
    pub kind: String,
    pub config: serde_json::Value,
    pub provenance: Provenance,
    /// Extra string lists a model needs to rebuild itself (user ids, ...).
    #[serde(default)]
    pub index: BTreeMap<String, Vec<String>>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, provenance: Provenance, params: ParamSet) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config: serde_json::to_value(config)?,
            provenance,
            index: BTreeMap::new(),
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Hash identifying this checkpoint's contents.
    pub fn id(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn config_as<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Fails unless this checkpoint holds parameters of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<&Self> {
        if self.kind != kind {
            return Err(SdaError::Config(format!(
                "checkpoint holds `{}` parameters, expected `{kind}`",
                self.kind
            )));
        }
        Ok(self)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SdaError::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| SdaError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(SdaError::Corrupt {
            path: path.to_path_buf(),
            message: format!("unexpected format tag `{}`", ckpt.format),
        });
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(SdaError::Version {
            found: ckpt.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    for (name, m) in &ckpt.params {
        if m.len() != m.rows() * m.cols() {
            return Err(SdaError::Corrupt {
                path: path.to_path_buf(),
                message: format!("parameter `{name}` has inconsistent shape"),
            });
        }
    }
    Ok(ckpt)
}
