//! Versioned weight container: a manifest of `(name, shape, dtype)` entries
//! plus base64-encoded little-endian `f64` blobs, stored as JSON.

use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, EncoderParams, NamedTensor};
use super::NnError;

pub const FORMAT: &str = "condbo.params";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamContainer {
    pub format: String,
    pub version: u32,
    pub encoder: Option<EncoderConfig>,
    pub manifest: Vec<ManifestEntry>,
    pub data: Vec<String>,
    /// Free-form companions (kernel parameters, standardization, ...).
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

fn err(m: impl Into<String>) -> NnError {
    NnError::Container(m.into())
}

impl ParamContainer {
    pub fn new(encoder: Option<(&EncoderConfig, &EncoderParams)>) -> Self {
        let mut c = ParamContainer {
            format: FORMAT.into(),
            version: VERSION,
            encoder: encoder.map(|(cfg, _)| cfg.clone()),
            manifest: Vec::new(),
            data: Vec::new(),
            meta: Default::default(),
        };
        if let Some((_, params)) = encoder {
            for t in params.tensors() {
                c.push(&t.name, &t.value);
            }
        }
        c
    }

    pub fn push(&mut self, name: &str, value: &Array2<f64>) {
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.manifest.push(ManifestEntry {
            name: name.into(),
            shape: [value.nrows(), value.ncols()],
            dtype: "f64".into(),
        });
        self.data.push(STANDARD.encode(bytes));
    }

    fn validate_header(&self) -> Result<(), NnError> {
        if self.format != FORMAT {
            return Err(err(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(err(format!("unsupported version {}", self.version)));
        }
        if self.manifest.len() != self.data.len() {
            return Err(err("manifest and data lengths differ"));
        }
        Ok(())
    }

    /// Decodes every tensor, checking blob lengths against the manifest.
    pub fn tensors(&self) -> Result<Vec<NamedTensor>, NnError> {
        self.validate_header()?;
        let mut out = Vec::with_capacity(self.manifest.len());
        for (entry, blob) in self.manifest.iter().zip(&self.data) {
            if entry.dtype != "f64" {
                return Err(err(format!("`{}`: unsupported dtype `{}`", entry.name, entry.dtype)));
            }
            let bytes = STANDARD
                .decode(blob)
                .map_err(|e| err(format!("`{}`: {e}", entry.name)))?;
            let [r, c] = entry.shape;
            let n = r.checked_mul(c).ok_or_else(|| err("shape overflow"))?;
            if bytes.len() != n.saturating_mul(8) {
                return Err(err(format!("`{}`: expected {} values, found {} bytes", entry.name, n, bytes.len())));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            out.push(NamedTensor {
                name: entry.name.clone(),
                value: Arc::new(Array2::from_shape_vec((r, c), vals).map_err(|e| err(e.to_string()))?),
            });
        }
        Ok(out)
    }

    /// Encoder weights, validated against `expected` (names, shapes and
    /// configuration equality).
    pub fn encoder_params(&self, expected: &EncoderConfig) -> Result<EncoderParams, NnError> {
        let stored = self.encoder.as_ref().ok_or_else(|| err("container holds no encoder"))?;
        if stored != expected {
            return Err(NnError::Config(format!(
                "stored encoder configuration {stored:?} does not match {expected:?}"
            )));
        }
        let tensors: Vec<NamedTensor> = self.tensors()?.into_iter().filter(|t| !t.name.starts_with("gp.")).collect();
        let params = EncoderParams::from_tensors(tensors);
        params.check_against(expected)?;
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("container serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let c: ParamContainer = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        c.validate_header()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
