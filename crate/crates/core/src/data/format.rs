//! `XBTE` embedding files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "XBTE"
//!      4     4  version (u32 LE, = 1)
//!      8     1  dtype (0 = f32)
//!      9     1  flags (bit0 = rows normalized)
//!     10     4  dim (u32 LE)
//!     14     8  rows (u64 LE)
//!     22     -  rows × dim f32 LE, row-major
//! ```
//!
//! Sample ids live in an optional sidecar `<file>.ids.json` = `{"ids": [...]}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, XbtError};
use crate::tensor::{norm, Matrix};

pub const MAGIC: &[u8; 4] = b"XBTE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 22;
pub const DTYPE_F32: u8 = 0;
pub const FLAG_NORMALIZED: u8 = 0b1;
/// Allowed deviation of a row norm from 1 when the normalized flag is set.
pub const NORM_TOLERANCE: f32 = 1e-3;

/// An embedding matrix with its on-disk metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub data: Matrix<f32>,
    pub normalized: bool,
    pub ids: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct IdsSidecar {
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn normalized(data: Matrix<f32>) -> Self {
        EmbeddingMatrix {
            data,
            normalized: true,
            ids: None,
        }
    }
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

pub fn encode(emb: &EmbeddingMatrix) -> Vec<u8> {
    let m = &emb.data;
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(if emb.normalized { FLAG_NORMALIZED } else { 0 });
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    for &x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses an `XBTE` image. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix> {
    let err = |offset: usize, detail: String| XbtError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(
            bytes.len(),
            format!(
                "truncated header: expected {HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(err(8, format!("unsupported dtype {}", bytes[8])));
    }
    let flags = bytes[9];
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(err(9, format!("unknown flag bits {flags:#04x}")));
    }
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let expected = (rows as u128) * (dim as u128) * 4;
    let actual = (bytes.len() - HEADER_LEN) as u128;
    if expected != actual {
        return Err(err(
            HEADER_LEN,
            format!(
                "payload length mismatch: expected {expected} bytes for {rows}×{dim}, found {actual}"
            ),
        ));
    }
    let rows = rows as usize;
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix::from_vec(rows, dim, data)?;
    let normalized = flags & FLAG_NORMALIZED != 0;
    if normalized {
        for (i, row) in m.iter_rows().enumerate() {
            let n = norm(row);
            if !((n - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(err(
                    HEADER_LEN + i * dim * 4,
                    format!("row {i} has norm {n} but the normalized flag is set"),
                ));
            }
        }
    }
    Ok(EmbeddingMatrix {
        data: m,
        normalized,
        ids: None,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| XbtError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| XbtError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| XbtError::io(path, e))?;
    tmp.persist(path).map_err(|e| XbtError::io(path, e.error))?;
    Ok(())
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    if let Some(ids) = &emb.ids {
        if ids.len() != emb.data.rows() {
            return Err(XbtError::Argument(format!(
                "{} ids for {} rows",
                ids.len(),
                emb.data.rows()
            )));
        }
        let sidecar = serde_json::to_vec(&IdsSidecar { ids: ids.clone() })?;
        write_atomic(&ids_path(path), &sidecar)?;
    }
    write_atomic(path, &encode(emb))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| XbtError::io(path, e))?;
    let mut emb = decode(&bytes, path)?;
    let sidecar = ids_path(path);
    if sidecar.exists() {
        let raw = fs::read(&sidecar).map_err(|e| XbtError::io(&sidecar, e))?;
        let ids: IdsSidecar = serde_json::from_slice(&raw)?;
        if ids.ids.len() != emb.data.rows() {
            return Err(XbtError::Format {
                path: sidecar,
                offset: 0,
                detail: format!("{} ids for {} rows", ids.ids.len(), emb.data.rows()),
            });
        }
        emb.ids = Some(ids.ids);
    }
    Ok(emb)
}
