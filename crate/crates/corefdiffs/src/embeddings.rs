//! Precomputed vertex vectors stored as JSON lines.
//!
//! The first line is a header `{"dim": D, "provider": "<id>"}`; every other
//! line is `{"sample", "doc", "cls", "vec": [f32; D]}`, where `cls` 0 is the
//! topic position and `cls` j the j-th segment.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use corefdiffs_core::corpus::DialogSample;
use corefdiffs_core::encoder::{build_encoder_input, Encoded, EmbeddingProvider, EncoderInput};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub provider: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    sample: String,
    doc: String,
    cls: usize,
    vec: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct FileProvider {
    header: EmbeddingHeader,
    vectors: HashMap<(String, String, usize), Vec<f64>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let fmt = |line: usize, reason: String| Error::Format {
            path: path.into(),
            line,
            reason,
        };
        let (_, first) = lines.next().ok_or_else(|| fmt(1, "missing header line".into()))?;
        let header: EmbeddingHeader = serde_json::from_str(first).map_err(|e| fmt(1, e.to_string()))?;
        let mut vectors = HashMap::new();
        for (i, line) in lines {
            let r: EmbeddingRecord = serde_json::from_str(line).map_err(|e| fmt(i + 1, e.to_string()))?;
            if r.vec.len() != header.dim {
                return Err(fmt(i + 1, format!("vector has {} values, header says {}", r.vec.len(), header.dim)));
            }
            let v = r.vec.iter().map(|&x| f64::from(x)).collect();
            if vectors.insert((r.sample, r.doc, r.cls), v).is_some() {
                return Err(fmt(i + 1, "duplicate (sample, doc, cls) key".into()));
            }
        }
        Ok(Self { header, vectors })
    }

    pub fn header(&self) -> &EmbeddingHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.header.dim
    }

    fn id(&self) -> String {
        format!("file({})", self.header.provider)
    }

    fn encode(&self, input: &EncoderInput) -> corefdiffs_core::Result<Encoded> {
        let vectors = (0..input.cls_positions.len())
            .map(|cls| {
                let key = (input.sample_id.clone(), input.doc_id.clone(), cls);
                self.vectors.get(&key).cloned().ok_or_else(|| {
                    corefdiffs_core::Error::Provider(format!(
                        "no vector for sample `{}` doc `{}` cls {cls}",
                        input.sample_id, input.doc_id
                    ))
                })
            })
            .collect::<corefdiffs_core::Result<_>>()?;
        Ok(Encoded {
            vectors,
            truncated: false,
        })
    }
}

/// Encodes every document of every sample with `provider` and writes the
/// vectors in the file format above.
pub fn export_embeddings(
    path: &Path,
    provider: &dyn EmbeddingProvider,
    samples: &[DialogSample],
    history_len: usize,
) -> Result<usize> {
    let header = EmbeddingHeader {
        dim: provider.dim(),
        provider: provider.id(),
    };
    let mut out = serde_json::to_string(&header).map_err(Error::json(path))? + "\n";
    let mut n = 0;
    for s in samples {
        for d in &s.documents {
            let input = build_encoder_input(s, d, history_len);
            let enc = provider.encode(&input)?;
            for (cls, v) in enc.vectors.into_iter().enumerate() {
                let r = EmbeddingRecord {
                    sample: s.sample_id.clone(),
                    doc: d.doc_id.clone(),
                    cls,
                    vec: v.into_iter().map(|x| x as f32).collect(),
                };
                out += &serde_json::to_string(&r).map_err(Error::json(path))?;
                out.push('\n');
                n += 1;
            }
        }
    }
    write_text(path, &out)?;
    Ok(n)
}
