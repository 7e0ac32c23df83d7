//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                          |
//! |-------|--------------------------------------------------|
//! | 8     | magic `MPDQACKP`                                 |
//! | 4     | format version (`u32`)                           |
//! | 8     | header length `n` (`u64`)                        |
//! | n     | UTF-8 JSON [`CheckpointHeader`]                  |
//! | ...   | parameter blocks as `f64`, in header order       |
//! | ...   | Adam first moments, then second moments, if kept |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{JointModel, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPDQACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<ParamMeta>,
    pub step: u64,
    pub adam_t: u64,
    pub has_optimizer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f64>,
    pub adam: Option<AdamState<f64>>,
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        train_config: &TrainConfig,
        model: &JointModel<T>,
        vocab: &Vocabulary,
        step: u64,
        adam: Option<&AdamState<T>>,
    ) -> Self {
        let mut params = ParamStore::new();
        let mut metas = Vec::new();
        for (name, t) in model.params().iter() {
            metas.push(ParamMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            params.add(name, t.cast::<f64>());
        }
        let adam = adam.map(|a| AdamState {
            m: a.m.iter().map(|b| widen(b)).collect(),
            v: a.v.iter().map(|b| widen(b)).collect(),
            t: a.t,
        });
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                train_config: train_config.clone(),
                model_config: model.config().clone(),
                vocab: vocab.tokens().to_vec(),
                params: metas,
                step,
                adam_t: adam.as_ref().map_or(0, |a| a.t),
                has_optimizer: adam.is_some(),
            },
            params,
            adam,
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_text(&self.header.vocab.join("\n"))
    }

    /// Rebuilds the model layout from the stored config and loads the weights.
    pub fn model<T: Scalar>(&self) -> Result<JointModel<T>> {
        let mut model = JointModel::<T>::new(self.header.model_config.clone(), 0)?;
        let mut cast = ParamStore::new();
        for (name, t) in self.params.iter() {
            cast.add(name, t.cast::<T>());
        }
        model.params_mut().load_from(&cast)?;
        Ok(model)
    }

    pub fn adam_state<T: Scalar>(&self) -> Option<AdamState<T>> {
        let narrow = |b: &Vec<f64>| b.iter().map(|&x| T::from_f64_lossy(x)).collect();
        self.adam.as_ref().map(|a| AdamState {
            m: a.m.iter().map(narrow).collect(),
            v: a.v.iter().map(narrow).collect(),
            t: a.t,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.total_values() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for t in self.params.tensors() {
            put(t.values());
        }
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(|b| put(b));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
        let mut rest = &body[len..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let (head, tail) = rest.split_at(8 * n);
            rest = tail;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut params = ParamStore::new();
        for meta in &header.params {
            let n = meta.shape.iter().product();
            params.add(meta.name.clone(), Tensor::new(meta.shape.clone(), take(n)?)?);
        }
        let adam = if header.has_optimizer {
            let sizes: Vec<usize> = header.params.iter().map(|m| m.shape.iter().product()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { m, v, t: header.adam_t })
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self { header, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
