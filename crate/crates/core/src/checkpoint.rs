//! Binary checkpoints: `SATC`, a version byte, a little-endian u32 manifest
//! length, the JSON manifest, then every tensor as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, CaptionerConfig};
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, ParameterStore};
use crate::vqa::{VqaConfig, VqaModel};

pub const MAGIC: &[u8; 4] = b"SATC";
pub const VERSION: u8 = 1;

pub const KIND_CAPTIONER: &str = "captioner";
pub const KIND_VQA: &str = "vqa";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub step_count: u64,
    pub tensors: Vec<TensorEntry>,
    pub extra: serde_json::Value,
}

/// A parameter store plus the metadata needed to rebuild its model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, p) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len() * 8;
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step_count: self.params.step_count(),
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(9 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing SATC magic".into()));
        }
        if bytes.len() < 5 {
            return Err(Error::Corruption("file ends before the version byte".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}, expected {VERSION}", bytes[4])));
        }
        if bytes.len() < 9 {
            return Err(Error::Corruption("file ends inside the manifest length".into()));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < len {
            return Err(Error::Corruption("file ends inside the manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Corruption(format!("manifest is not valid JSON: {e}")))?;
        let payload = &body[len..];
        let mut params = ParameterStore::new();
        let mut expected_offset = 0;
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != expected_offset {
                return Err(Error::Corruption(format!("tensor {} has offset {}, expected {expected_offset}", t.name, t.offset)));
            }
            let end = t.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Corruption(format!("payload truncated inside tensor {}", t.name)));
            }
            let data = payload[t.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = DenseArray::from_vec(&t.shape, data).map_err(|e| Error::Corruption(e.to_string()))?;
            params.insert(&t.name, value).map_err(|e| Error::Corruption(e.to_string()))?;
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(Error::Corruption(format!(
                "payload holds {} bytes, manifest accounts for {expected_offset}",
                payload.len()
            )));
        }
        params.set_step_count(manifest.step_count);
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            extra: manifest.extra,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }

    fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Corruption(format!("config: {e}")))
    }

    pub fn from_captioner(model: &Captioner, extra: serde_json::Value) -> Self {
        Self {
            kind: KIND_CAPTIONER.into(),
            config: serde_json::to_value(&model.config).expect("config serializes"),
            extra,
            params: model.params.clone(),
        }
    }

    pub fn from_vqa(model: &VqaModel, extra: serde_json::Value) -> Self {
        Self {
            kind: KIND_VQA.into(),
            config: serde_json::to_value(&model.config).expect("config serializes"),
            extra,
            params: model.params.clone(),
        }
    }

    /// Rebuild a captioner; `regions` checks the grid the caller will feed.
    pub fn into_captioner(self, regions: Option<usize>) -> Result<Captioner> {
        self.expect_kind(KIND_CAPTIONER)?;
        let config: CaptionerConfig = self.config_as()?;
        check_regions(config.regions, regions)?;
        Captioner::from_parts(config, self.params).map_err(|e| Error::Corruption(e.to_string()))
    }

    pub fn into_vqa(self, regions: Option<usize>) -> Result<VqaModel> {
        self.expect_kind(KIND_VQA)?;
        let config: VqaConfig = self.config_as()?;
        check_regions(config.regions, regions)?;
        VqaModel::from_parts(config, self.params).map_err(|e| Error::Corruption(e.to_string()))
    }
}

fn check_regions(stored: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(l) if l != stored => Err(Error::Dimension(format!(
            "checkpoint was trained on {stored} regions, features have {l}"
        ))),
        _ => Ok(()),
    }
}
