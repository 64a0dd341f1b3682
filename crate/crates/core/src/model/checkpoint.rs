//! Checkpoint file: 8 magic bytes, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f64` in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::dataset::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNCCAP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    /// Number of completed epochs.
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
    /// Free-form training metadata (configuration, best score).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    vocab: Vec<String>,
    epoch: usize,
    optimizer_step: Option<u64>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocab) -> Self {
        Self {
            model,
            vocab,
            epoch: 0,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let p = self.model.params();
        let mut out: Vec<(String, &Tensor)> = p.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (n, t) in p.names().iter().zip(&opt.m) {
                out.push((format!("{M_PREFIX}{n}"), t));
            }
            for (n, t) in p.names().iter().zip(&opt.v) {
                out.push((format!("{V_PREFIX}{n}"), t));
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.all_tensors();
        let mut offset = 0u64;
        let index = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model.config().clone(),
            vocab: self.vocab.words().to_vec(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
            tensors: index,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in tensors {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)
            .map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;

        let mut params = Params::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(bad(format!("tensor {} extends past end of file", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if e.name.starts_with(M_PREFIX) {
                m.push(t);
            } else if e.name.starts_with(V_PREFIX) {
                v.push(t);
            } else {
                params.insert(e.name.clone(), t)?;
            }
        }
        let vocab = Vocab::from_words(header.vocab)?;
        if vocab.len() != header.model_config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} entries but config says {}",
                vocab.len(),
                header.model_config.vocab_size
            )));
        }
        let model = Model::from_params(header.model_config, params)?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let shapes_match = |ts: &[Tensor]| {
                    ts.len() == model.params().len()
                        && ts.iter().zip(model.params().tensors()).all(|(a, b)| a.shape() == b.shape())
                };
                if !shapes_match(&m) || !shapes_match(&v) {
                    return Err(bad("optimizer moments do not match parameters".into()));
                }
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model,
            vocab,
            epoch: header.epoch,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read(BufReader::new(f))
    }
}
