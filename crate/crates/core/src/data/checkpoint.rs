//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian, all floats f64 little-endian):
//!
//! ```text
//! "HTRW" | version | layer count L | L x (rows | cols | rows*cols weights, row-major | cols biases)
//! ```
//!
//! Free-form JSON metadata is written next to the checkpoint as `<path>.json`.

use std::path::{Path, PathBuf};

use super::{read_file, DataError};
use crate::nn::MlpModel;
use crate::spectral::WeightMatrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HTRW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.weights.len() as u32).to_le_bytes());
    for (w, b) in model.weights.iter().zip(&model.biases) {
        out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for v in w.row_major_values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(DataError::TruncatedFile {
            expected: self.at.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| DataError::Corrupt(format!("{what} size overflows")))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MlpModel, DataError> {
    if bytes.len() < 4 && CHECKPOINT_MAGIC.starts_with(bytes) {
        return Err(DataError::TruncatedFile {
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(DataError::BadMagic {
            expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
            found: u32::from_be_bytes(found),
        });
    }
    let mut r = Reader { bytes, at: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionUnsupported(version));
    }
    let layers = r.u32()? as usize;
    if layers == 0 {
        return Err(DataError::Corrupt("checkpoint has no layers".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layers {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(DataError::Corrupt(format!("layer {l} has shape {rows}x{cols}")));
        }
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| DataError::Corrupt(format!("layer {l} shape overflows")))?;
        let values = r.f64s(count, "weights")?;
        let w = WeightMatrix::from_row_major(rows, cols, &values)
            .map_err(|e| DataError::Corrupt(format!("layer {l}: {e}")))?;
        let b = r.f64s(cols, "biases")?;
        if b.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Corrupt(format!("layer {l}: non-finite bias")));
        }
        weights.push(w);
        biases.push(b);
    }
    if r.at != bytes.len() {
        return Err(DataError::TrailingBytes(bytes.len() - r.at));
    }
    MlpModel::from_parts(weights, biases).map_err(|e| DataError::Corrupt(e.to_string()))
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the checkpoint and, when given, its JSON metadata sidecar.
pub fn save_checkpoint(
    model: &MlpModel,
    metadata: Option<&serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, encode_checkpoint(model)).map_err(io_err(path))?;
    if let Some(meta) = metadata {
        let side = metadata_path(path);
        let text = serde_json::to_string_pretty(meta)?;
        std::fs::write(&side, text).map_err(io_err(&side))?;
    }
    Ok(())
}

/// Loads a checkpoint plus its metadata sidecar, if one exists.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(MlpModel, Option<serde_json::Value>), DataError> {
    let path = path.as_ref();
    let model = decode_checkpoint(&read_file(path)?)?;
    let side = metadata_path(path);
    let metadata = if side.exists() {
        Some(serde_json::from_slice(&read_file(&side)?)?)
    } else {
        None
    };
    Ok((model, metadata))
}
