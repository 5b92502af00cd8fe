//! The learnable part of the solver: one encoding per reasoned attribute,
//! plus the versioned checkpoint format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{init_encoding, init_independent, AlgebraError, Encoding, IndependentEncoding, PeanoEncoding};
use crate::rpm::Attribute;
use crate::tape::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// `M^k * M0` per value.
    Peano,
    /// One free matrix per value.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// In `Attribute::ENCODED` order.
    pub encodings: Vec<Encoding>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(kind: EncodingKind, d: usize, rng: &mut R) -> Result<Self, AlgebraError> {
        let encodings = Attribute::ENCODED
            .iter()
            .map(|&a| {
                Ok(match kind {
                    EncodingKind::Peano => Encoding::Peano(init_encoding(a, d, rng)?),
                    EncodingKind::Independent => Encoding::Independent(init_independent(a, d, rng)?),
                })
            })
            .collect::<Result<_, AlgebraError>>()?;
        Ok(Model { encodings })
    }

    pub fn kind(&self) -> EncodingKind {
        match self.encodings[0] {
            Encoding::Peano(_) => EncodingKind::Peano,
            Encoding::Independent(_) => EncodingKind::Independent,
        }
    }

    pub fn d(&self) -> usize {
        self.encodings[0].d()
    }

    pub fn encoding(&self, attr: Attribute) -> Option<&Encoding> {
        attr.encoded_slot().map(|i| &self.encodings[i])
    }

    /// Number of scalar parameters owned by each encoding.
    pub fn param_counts(&self) -> Vec<usize> {
        self.encodings
            .iter()
            .map(|e| e.params().iter().map(|m| m.len()).sum())
            .collect()
    }

    /// All parameters flattened (encoding order, then matrix order, column-major).
    pub fn flatten(&self) -> Vec<f64> {
        self.encodings
            .iter()
            .flat_map(|e| e.params().into_iter().flat_map(|m| m.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for e in &mut self.encodings {
            for m in e.params_mut() {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        assert_eq!(pos, flat.len(), "parameter vector length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.encodings.iter().all(Encoding::is_finite)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
}

/// Row-major matrix record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord(pub Vec<Vec<f64>>);

impl MatrixRecord {
    pub fn from_mat(m: &Mat) -> Self {
        MatrixRecord(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    pub fn to_mat(&self) -> Result<Mat, String> {
        let rows = self.0.len();
        let cols = self.0.first().map_or(0, Vec::len);
        if rows == 0 || self.0.iter().any(|r| r.len() != cols) {
            return Err("ragged or empty matrix".into());
        }
        Ok(Mat::from_fn(rows, cols, |i, j| self.0[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingRecord {
    pub attribute: Attribute,
    pub d: usize,
    /// Peano: `[M0, M]`; independent: `[E_0, ..., E_{n-1}]`.
    pub matrices: Vec<MatrixRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// On-disk checkpoint. Field order: version, encoding kind, dimension,
/// encodings (attribute order number, type, size, color), optimizer state,
/// free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: EncodingKind,
    pub d: usize,
    pub encodings: Vec<EncodingRecord>,
    pub optimizer: Option<AdamRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<AdamRecord>, meta: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: model.kind(),
            d: model.d(),
            encodings: model
                .encodings
                .iter()
                .map(|e| EncodingRecord {
                    attribute: e.attribute(),
                    d: e.d(),
                    matrices: e.params().into_iter().map(MatrixRecord::from_mat).collect(),
                })
                .collect(),
            optimizer,
            meta,
        }
    }

    pub fn to_model(&self) -> Result<Model, String> {
        if self.encodings.len() != Attribute::ENCODED.len() {
            return Err(format!("expected {} encodings", Attribute::ENCODED.len()));
        }
        let mut encodings = Vec::new();
        for (rec, &attr) in self.encodings.iter().zip(Attribute::ENCODED.iter()) {
            if rec.attribute != attr {
                return Err(format!("encoding for {} out of order", rec.attribute));
            }
            let mats = rec.matrices.iter().map(MatrixRecord::to_mat).collect::<Result<Vec<_>, _>>()?;
            if mats.iter().any(|m| m.nrows() != rec.d || m.ncols() != rec.d) {
                return Err(format!("{attr} matrices are not {0}x{0}", rec.d));
            }
            encodings.push(match self.kind {
                EncodingKind::Peano => {
                    let [m0, m]: [Mat; 2] = mats.try_into().map_err(|_| format!("{attr}: expected M0 and M"))?;
                    Encoding::Peano(PeanoEncoding { attribute: attr, d: rec.d, m0, m })
                }
                EncodingKind::Independent => {
                    if mats.len() != attr.cardinality() {
                        return Err(format!("{attr}: expected {} value matrices", attr.cardinality()));
                    }
                    Encoding::Independent(IndependentEncoding {
                        attribute: attr,
                        d: rec.d,
                        values: mats,
                    })
                }
            });
        }
        Ok(Model { encodings })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                path: path.to_path_buf(),
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(raw).map_err(|e| CheckpointError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        ck.to_model().map_err(|msg| CheckpointError::Malformed {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::init(EncodingKind::Independent, 3, &mut rng).unwrap();
        let flat = model.flatten();
        assert_eq!(flat.len(), (9 + 5 + 6 + 10) * 9);
        let mut other = Model::init(EncodingKind::Independent, 3, &mut rng).unwrap();
        other.assign(&flat);
        assert_eq!(other, model);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(EncodingKind::Peano, 4, &mut rng).unwrap();
        let ck = Checkpoint::from_model(&model, None, serde_json::json!({"variant": "alans"}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
    }
}
