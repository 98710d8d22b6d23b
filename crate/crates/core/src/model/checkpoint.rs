//! Checkpoint container.
//!
//! ```text
//! PROMPTSEG-CKPT\n
//! {"format_version":1,"config":{..},"tensors":[{"name":..,"shape":[..]},..],"meta":{..}}\n
//! <f32 little-endian payload, tensors concatenated in header order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "PROMPTSEG-CKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus the model configuration and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        let mut buf = Vec::new();
        for (_, t) in &self.tensors {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic line".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                header.format_version
            )));
        }
        header.config.validate()?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("payload ends inside tensor {}", e.name)))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self { config: header.config, tensors, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

impl Model {
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .params
                .ids()
                .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
                .collect(),
            meta,
        }
    }

    /// Rebuild from a checkpoint; every model tensor must be present with its exact shape.
    /// Tensors whose names the model does not know are ignored only under `optim.`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.config.clone(), 0)?;
        let mut seen = 0usize;
        for (name, t) in &ckpt.tensors {
            match model.params.find(name) {
                Some(id) => {
                    if model.params.get(id).shape() != t.shape() {
                        return Err(Error::Checkpoint(format!(
                            "tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            model.params.get(id).shape()
                        )));
                    }
                    *model.params.get_mut(id) = t.clone();
                    seen += 1;
                }
                None if name.starts_with("optim.") => {}
                None => return Err(Error::Checkpoint(format!("unknown tensor {name}"))),
            }
        }
        if seen != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} model tensors",
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Load and require a specific configuration.
    pub fn load_compatible(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} is incompatible with {:?}",
                ckpt.config, expected
            )));
        }
        Self::from_checkpoint(&ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
