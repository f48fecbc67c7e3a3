//! Serialized encoder inputs and initial vertex embeddings.
//!
//! Each document is serialized together with the recent dialog context as
//!
//! ```text
//! [CLS] [USR] u_t [AGT] r_{t-1} [USR] u_{t-1} … [SEP] topic [CLS] k_1 … [CLS] k_n [SEP]
//! ```
//!
//! and an [`EmbeddingProvider`] returns one vector per `[CLS]`: the first
//! initializes the topic vertex, the rest the knowledge vertices in order.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogSample, Document, Role};
use crate::error::{Error, Result};
use crate::graph::CorefMDG;
use crate::tensor::Matrix;
use crate::text;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const USR: &str = "[USR]";
pub const AGT: &str = "[AGT]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub sample_id: String,
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub cls_positions: Vec<usize>,
    /// Retained turns, newest first.
    pub context: Vec<(Role, String)>,
    pub topic: String,
    pub segments: Vec<String>,
}

impl EncoderInput {
    pub fn serialized(&self) -> String {
        self.tokens.join(" ")
    }
}

fn push_words(tokens: &mut Vec<String>, s: &str) {
    tokens.extend(s.split_whitespace().map(ToString::to_string));
}

/// Keeps turns from newest to oldest until the `l`-th user turn is included.
pub fn build_encoder_input(sample: &DialogSample, doc: &Document, history_len: usize) -> EncoderInput {
    let l = history_len.max(1);
    let mut context = Vec::new();
    let mut users = 0;
    for turn in sample.turns.iter().rev() {
        context.push((turn.role, turn.utterance.clone()));
        if turn.role == Role::User {
            users += 1;
            if users == l {
                break;
            }
        }
    }
    let mut tokens = vec![CLS.to_string()];
    let mut cls_positions = vec![0];
    for (role, utt) in &context {
        tokens.push(match role {
            Role::User => USR,
            Role::Agent => AGT,
        }
        .to_string());
        push_words(&mut tokens, utt);
    }
    tokens.push(SEP.into());
    push_words(&mut tokens, &doc.topic);
    for seg in &doc.segments {
        cls_positions.push(tokens.len());
        tokens.push(CLS.into());
        push_words(&mut tokens, &seg.text);
    }
    tokens.push(SEP.into());
    EncoderInput {
        sample_id: sample.sample_id.clone(),
        doc_id: doc.doc_id.clone(),
        tokens,
        cls_positions,
        context,
        topic: doc.topic.clone(),
        segments: doc.segments.iter().map(|s| s.text.clone()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// One vector per `[CLS]` position.
    pub vectors: Vec<Vec<f64>>,
    /// Set when the provider had to cut the input.
    pub truncated: bool,
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Provider name and configuration, recorded in run manifests.
    fn id(&self) -> String;
    fn encode(&self, input: &EncoderInput) -> Result<Encoded>;
}

/// Returns the same vector for every position.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantProvider {
    pub dim: usize,
    pub value: f64,
}

impl EmbeddingProvider for ConstantProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("constant(dim={},value={})", self.dim, self.value)
    }

    fn encode(&self, input: &EncoderInput) -> Result<Encoded> {
        Ok(Encoded {
            vectors: vec![vec![self.value; self.dim]; input.cls_positions.len()],
            truncated: false,
        })
    }
}

/// Number of trailing dimensions holding context-overlap features.
pub const OVERLAP_CHANNELS: usize = 3;

/// Deterministic stand-in for a transformer encoder.
///
/// Each span becomes a signed, seeded feature-hashing bag of its tokens. When
/// `dim >= 8` the last three dimensions carry the fraction of the span's
/// content tokens that also occur in the latest user turn, the latest agent
/// turn, and anywhere in the retained context. This is the only place the
/// dialog enters the initial embeddings. The result is L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct HashingFeaturizer {
    dim: usize,
    seed: u64,
}

impl HashingFeaturizer {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("featurizer dimension must be at least 1".into()));
        }
        Ok(Self { dim, seed })
    }

    fn channels(&self) -> usize {
        if self.dim >= 8 {
            OVERLAP_CHANNELS
        } else {
            0
        }
    }

    fn hash(&self, token: &str) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write(token.as_bytes());
        h.finish()
    }

    pub fn embed(&self, span: &str, context: &[(Role, String)]) -> Vec<f64> {
        let buckets = self.dim - self.channels();
        let mut v = vec![0.0; self.dim];
        let tokens = text::tokenize(span);
        for t in &tokens {
            let h = self.hash(t);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % buckets as u64) as usize] += sign;
        }
        let norm = libm::sqrt(v[..buckets].iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            v[..buckets].iter_mut().for_each(|x| *x /= norm);
        }
        if self.channels() > 0 {
            let content: Vec<&String> = tokens.iter().filter(|t| !text::is_stopword(t)).collect();
            let bag = |pred: &dyn Fn(&Role) -> bool, newest_only: bool| {
                let mut words = alloc::collections::BTreeSet::new();
                for (_, utt) in context.iter().filter(|(r, _)| pred(r)) {
                    words.extend(text::tokenize(utt));
                    if newest_only {
                        break;
                    }
                }
                words
            };
            let user = bag(&|r| *r == Role::User, true);
            let agent = bag(&|r| *r == Role::Agent, true);
            let any = bag(&|_| true, false);
            let frac = |set: &alloc::collections::BTreeSet<String>| {
                if content.is_empty() {
                    0.0
                } else {
                    content.iter().filter(|t| set.contains(t.as_str())).count() as f64 / content.len() as f64
                }
            };
            v[buckets] = frac(&user);
            v[buckets + 1] = frac(&agent);
            v[buckets + 2] = frac(&any);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashingFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("hashing(dim={},seed={})", self.dim, self.seed)
    }

    fn encode(&self, input: &EncoderInput) -> Result<Encoded> {
        let mut vectors = Vec::with_capacity(input.cls_positions.len());
        vectors.push(self.embed(&input.topic, &input.context));
        for seg in &input.segments {
            vectors.push(self.embed(seg, &input.context));
        }
        Ok(Encoded {
            vectors,
            truncated: false,
        })
    }
}

/// `H⁰` in canonical vertex order.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexEmbeddings {
    pub matrix: Matrix,
    pub truncated: bool,
}

impl VertexEmbeddings {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn encode_vertices(
    sample: &DialogSample,
    graph: &CorefMDG,
    provider: &dyn EmbeddingProvider,
    history_len: usize,
) -> Result<VertexEmbeddings> {
    let d = provider.dim();
    let m = graph.num_topics();
    let mut matrix = Matrix::zeros(graph.num_vertices(), d);
    let mut truncated = false;
    let mut next_knowledge = m;
    for (t, tv) in graph.topic_vertices.iter().enumerate() {
        let doc = sample
            .document(&tv.doc_id)
            .ok_or_else(|| Error::Provider(format!("graph document `{}` not in sample", tv.doc_id)))?;
        let input = build_encoder_input(sample, doc, history_len);
        let enc = provider.encode(&input)?;
        if enc.vectors.len() != input.cls_positions.len() {
            return Err(Error::Dimension {
                context: "provider vectors per [CLS]",
                expected: input.cls_positions.len(),
                actual: enc.vectors.len(),
            });
        }
        truncated |= enc.truncated;
        for (k, vec) in enc.vectors.iter().enumerate() {
            if vec.len() != d {
                return Err(Error::Dimension {
                    context: "provider vector",
                    expected: d,
                    actual: vec.len(),
                });
            }
            let row = if k == 0 {
                t
            } else {
                next_knowledge + k - 1
            };
            matrix.row_mut(row).copy_from_slice(vec);
        }
        next_knowledge += doc.len();
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite(format!("embeddings of sample `{}`", sample.sample_id)));
    }
    Ok(VertexEmbeddings { matrix, truncated })
}
