//! Binary checkpoint files.
//!
//! Layout: `CDCK`, format version (u32 LE), header length (u64 LE), a JSON
//! header, then every tensor as row-major f64 LE in header order: the model
//! parameters, then the optimizer's first and second moments.

use std::fs;
use std::path::Path;

use corefdiffs_core::eval::SelectionMetrics;
use corefdiffs_core::graph::EdgeVocab;
use corefdiffs_core::model::{Model, ModelConfig};
use corefdiffs_core::optim::Adam;
use corefdiffs_core::trainer::{Checkpoint, TrainConfig};
use corefdiffs_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerInfo {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    train_config: TrainConfig,
    num_edge_types: usize,
    edge_vocab: Vec<String>,
    tensors: Vec<TensorInfo>,
    optimizer: OptimizerInfo,
    metrics: Option<SelectionMetrics>,
}

/// A checkpoint together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredCheckpoint {
    pub checkpoint: Checkpoint,
    pub train_config: TrainConfig,
}

impl StoredCheckpoint {
    /// Rejects a checkpoint whose edge vocabulary or model dimensions differ
    /// from the current run.
    pub fn check_compatible(&self, vocab: &EdgeVocab, model: Option<&ModelConfig>) -> Result<()> {
        self.checkpoint.check_vocab(vocab)?;
        if let Some(m) = model {
            let c = &self.checkpoint.model.config;
            let dims = |m: &ModelConfig| (m.d_init, m.d_g, m.d_e, m.heads, m.layers, m.gru_layers, m.history);
            if dims(c) != dims(m) {
                return Err(corefdiffs_core::Error::Config(format!(
                    "checkpoint dims (d_init, d_g, d_e, heads, layers, gru_layers, history) = {:?}, run expects {:?}",
                    dims(c),
                    dims(m)
                ))
                .into());
            }
        }
        Ok(())
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint, train_config: &TrainConfig) -> Vec<u8> {
    let model = &ckpt.model;
    let header = Header {
        config_hash: format!("{:016x}", ckpt.config_hash),
        step: ckpt.step,
        train_config: train_config.clone(),
        num_edge_types: model.num_edge_types,
        edge_vocab: ckpt.edge_vocab.clone(),
        tensors: model
            .params
            .iter()
            .map(|(n, m)| TensorInfo {
                name: n.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        optimizer: OptimizerInfo {
            beta1: ckpt.optimizer.beta1,
            beta2: ckpt.optimizer.beta2,
            eps: ckpt.optimizer.eps,
            step: ckpt.optimizer.step,
        },
        metrics: ckpt.metrics.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in model.params.values() {
        push_matrix(&mut out, m);
    }
    for m in ckpt.optimizer.m.iter().chain(&ckpt.optimizer.v) {
        push_matrix(&mut out, m);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> std::result::Result<Matrix, String> {
        let n = rows.checked_mul(cols).ok_or("tensor size overflows")?;
        let raw = self.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<StoredCheckpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| "header length overflows")?;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| format!("header: {e}"))?;

    // The stored tensors must be exactly what this configuration builds.
    let config = header.train_config.model.clone();
    let fresh = Model::new(config.clone(), header.num_edge_types, 0).map_err(|e| e.to_string())?;
    let expect: Vec<(&str, (usize, usize))> = fresh.params.iter().map(|(n, m)| (n, m.shape())).collect();
    let got: Vec<(&str, (usize, usize))> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), (t.rows, t.cols)))
        .collect();
    if expect != got {
        return Err("tensor names or shapes do not match the stored model configuration".into());
    }
    if header.edge_vocab.len() != header.num_edge_types {
        return Err("edge vocabulary length differs from the number of edge types".into());
    }
    let mut params = Vec::with_capacity(got.len());
    for t in &header.tensors {
        params.push((t.name.clone(), r.matrix(t.rows, t.cols)?));
    }
    let mut moments = Vec::with_capacity(2 * got.len());
    for _ in 0..2 {
        for t in &header.tensors {
            moments.push(r.matrix(t.rows, t.cols)?);
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let v = moments.split_off(got.len());
    let o = &header.optimizer;
    let config_hash = u64::from_str_radix(&header.config_hash, 16).map_err(|e| format!("config hash: {e}"))?;
    Ok(StoredCheckpoint {
        checkpoint: Checkpoint {
            model: Model {
                config,
                num_edge_types: header.num_edge_types,
                params: params.into_iter().collect(),
            },
            optimizer: Adam {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m: moments,
                v,
            },
            step: header.step,
            config_hash,
            edge_vocab: header.edge_vocab,
            metrics: header.metrics,
        },
        train_config: header.train_config,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, train_config: &TrainConfig) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode_checkpoint(ckpt, train_config)).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<StoredCheckpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.into(),
        reason,
    })
}

