//! Checkpoint files: a magic line, a little-endian `u64` header length, a
//! JSON header (format version, config echo, parameter manifest) and the flat
//! parameter vector as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ManifestEntry, Parameterized};

pub const MAGIC: &[u8; 13] = b"FREQMOE-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: RunConfig,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: Model) -> Result<Self> {
        if *model.spec() != config.model {
            return Err(Error::Compatibility("model does not match the configuration it is saved with".into()));
        }
        Ok(Checkpoint { config, model })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            manifest: self.model.manifest(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header always serializes");
        let params = self.model.flatten();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Compatibility(format!("not a valid checkpoint: {msg}"));
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| corrupt("bad magic"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let (len_bytes, rest) = rest.split_at(8);
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        if rest.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let (json, payload) = rest.split_at(header_len);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut model = Model::new(header.config.model, header.config.seed)?;
        if model.manifest() != header.manifest {
            return Err(Error::Compatibility(
                "parameter manifest does not match the configured architecture".into(),
            ));
        }
        if payload.len() != 8 * model.real_len() {
            return Err(corrupt(&format!(
                "payload holds {} bytes, manifest needs {}",
                payload.len(),
                8 * model.real_len()
            )));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.load_flat(&flat);
        Ok(Checkpoint {
            config: header.config,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
