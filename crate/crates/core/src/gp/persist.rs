//! Versioned JSON model document.
//!
//! Only the data needed to rebuild the model is stored; the Cholesky factor
//! and weights are recomputed on load after the stored SHA-256 checksums of
//! the inputs and targets have been verified.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{train, GpError, GpModel, Kernel};
use crate::features::Normalizer;

pub const MODEL_FORMAT: &str = "skillscope-gp-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("model document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format '{0}'")]
    UnsupportedFormat(String),
    #[error("unknown model version {0}")]
    UnknownVersion(u32),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(&'static str),
    #[error("inconsistent model document: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub inputs: String,
    pub targets: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub kernel: Kernel,
    pub normalizer: Normalizer,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub checksums: Checksums,
}

fn sha256_hex<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelDocument {
    pub fn from_model(m: &GpModel) -> Self {
        let inputs = m.rows();
        let checksums = Checksums {
            inputs: sha256_hex(inputs.iter().flatten()),
            targets: sha256_hex(m.targets().iter()),
        };
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            kernel: m.kernel().clone(),
            normalizer: m.normalizer().clone(),
            inputs,
            targets: m.targets().to_vec(),
            checksums,
        }
    }

    pub fn into_model(self) -> Result<GpModel, ModelIoError> {
        if self.format != MODEL_FORMAT {
            return Err(ModelIoError::UnsupportedFormat(self.format));
        }
        if self.version != MODEL_VERSION {
            return Err(ModelIoError::UnknownVersion(self.version));
        }
        if sha256_hex(self.inputs.iter().flatten()) != self.checksums.inputs {
            return Err(ModelIoError::ChecksumMismatch("inputs"));
        }
        if sha256_hex(self.targets.iter()) != self.checksums.targets {
            return Err(ModelIoError::ChecksumMismatch("targets"));
        }
        if self.inputs.is_empty() {
            return Ok(GpModel::empty(&self.kernel, self.normalizer)?);
        }
        let d = self.kernel.dim();
        if let Some(r) = self.inputs.iter().find(|r| r.len() != d) {
            return Err(ModelIoError::Inconsistent(format!("input row of length {} for a {d}-dimensional kernel", r.len())));
        }
        Ok(train(&self.inputs, &self.targets, &self.kernel, self.normalizer)?)
    }
}

pub fn model_to_json(m: &GpModel) -> String {
    serde_json::to_string_pretty(&ModelDocument::from_model(m)).expect("model document serializes")
}

pub fn model_from_json(s: &str) -> Result<GpModel, ModelIoError> {
    let doc: ModelDocument = serde_json::from_str(s)?;
    doc.into_model()
}

pub fn save_model(m: &GpModel, path: &Path) -> Result<(), ModelIoError> {
    std::fs::write(path, model_to_json(m)).map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })
}

pub fn load_model(path: &Path) -> Result<GpModel, ModelIoError> {
    let s = std::fs::read_to_string(path).map_err(|source| ModelIoError::Io { path: path.display().to_string(), source })?;
    model_from_json(&s)
}
