//! Checkpoint container.
//!
//! ```text
//! "TRNC1"            5 bytes
//! header length      u32 LE
//! header             UTF-8 JSON: format version, model config, tensor
//!                    names and shapes, optimizer scalars, trainer metadata
//! parameters         f32 LE, tensors in header order
//! optimizer moments  first then second moments, same order (optional)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use crate::error::{bail, Error, Result};
use crate::numcore::nn::ParamStore;
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TRNC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments and step counter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form trainer state (epoch, scheduler, metrics).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            config: model.config.clone(),
            params: model.store.clone(),
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_store(self.config.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                lr: o.lr,
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len() + 12 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(&p.value);
        }
        if let Some(o) = &self.optimizer {
            if o.first.len() != self.params.len() || o.second.len() != self.params.len() {
                bail!(Contract, "optimizer moments do not mirror the parameters");
            }
            o.first.iter().chain(&o.second).for_each(&mut put);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"TRNC1\""));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let json = bytes
            .get(9..9 + len)
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::format(9, format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                9,
                format!("checkpoint version {} is not supported", header.version),
            ));
        }
        let mut offset = 9 + len;
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| Error::format(bytes.len() as u64, "truncated payload"))?;
            offset = end;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        for e in &header.tensors {
            params.add(e.name.clone(), take(&e.shape)?);
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let first = header
                    .tensors
                    .iter()
                    .map(|e| take(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                let second = header
                    .tensors
                    .iter()
                    .map(|e| take(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerState {
                    step: o.step,
                    lr: o.lr,
                    first,
                    second,
                })
            }
            None => None,
        };
        if offset != bytes.len() {
            return Err(Error::format(offset as u64, "trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkpoint() -> Checkpoint {
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        let shapes: Vec<_> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
        ck.optimizer = Some(OptimizerState {
            step: 17,
            lr: 3e-5,
            first: shapes.iter().map(|t| t.map(|v| v * 0.5)).collect(),
            second: shapes.iter().map(|t| t.map(|v| v * v)).collect(),
        });
        ck.meta = serde_json::json!({"epoch": 4});
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = checkpoint();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
        back.model().unwrap();
    }

    #[test]
    fn corrupt_files() {
        let bytes = checkpoint().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::decode(&longer).is_err());
    }
}
