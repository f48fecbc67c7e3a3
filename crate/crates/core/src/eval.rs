//! Selection accuracy (KL, TP, In-TP) and token-overlap F1.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogSample, Label};
use crate::error::{Error, Result};
use crate::text::tokenize;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut bag = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *bag.entry(w).or_insert(0) += 1;
        }
    }
    bag
}

fn ngram_f1(hyp: &[String], reference: &[String], n: usize) -> f64 {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let (nh, nr): (usize, usize) = (h.values().sum(), r.values().sum());
    match (nh, nr) {
        // Too short for any n-gram: only an exact match scores.
        (0, 0) => return if hyp == reference { 1.0 } else { 0.0 },
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = h
        .iter()
        .map(|(g, c)| r.get(g).map_or(0, |rc| (*c).min(*rc)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / nh as f64;
    let rc = overlap as f64 / nr as f64;
    2.0 * p * rc / (p + rc)
}

/// Unigram F1 over lowercase alphanumeric tokens (bag semantics).
pub fn unigram_f1(hypothesis: &str, reference: &str) -> f64 {
    ngram_f1(&tokenize(hypothesis), &tokenize(reference), 1)
}

pub fn bigram_f1(hypothesis: &str, reference: &str) -> f64 {
    ngram_f1(&tokenize(hypothesis), &tokenize(reference), 2)
}

pub fn uf1_bf1(hypothesis: &str, reference: &str) -> (f64, f64) {
    let h = tokenize(hypothesis);
    let r = tokenize(reference);
    (ngram_f1(&h, &r, 1), ngram_f1(&h, &r, 2))
}

/// Mean `(uF1, bF1)` over `(hypothesis, reference)` pairs.
pub fn generation_metrics<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let (mut u, mut b) = (0.0, 0.0);
    for (h, r) in pairs {
        let (x, y) = uf1_bf1(h, r);
        u += x;
        b += y;
        n += 1;
    }
    (n > 0).then(|| (u / n as f64, b / n as f64))
}

/// One model decision: the predicted topic (document id) and segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub topic: String,
    pub knowledge: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub kl: f64,
    pub tp: f64,
    /// `None` when no sample qualifies as an intra-topic transition.
    pub in_tp: Option<f64>,
    pub n_samples: usize,
    pub n_intra_topic: usize,
}

/// KL and TP over all samples; In-TP over samples whose gold stays in the
/// document of the most recent labeled agent turn.
pub fn selection_metrics(predictions: &[Prediction], samples: &[DialogSample]) -> Result<SelectionMetrics> {
    if predictions.len() != samples.len() {
        return Err(Error::Dimension {
            context: "predictions per sample",
            expected: samples.len(),
            actual: predictions.len(),
        });
    }
    let (mut kl, mut tp, mut intra, mut intra_hit) = (0usize, 0usize, 0usize, 0usize);
    for (p, s) in predictions.iter().zip(samples) {
        if p.sample_id != s.sample_id {
            return Err(Error::Label(format!(
                "prediction for `{}` paired with sample `{}`",
                p.sample_id, s.sample_id
            )));
        }
        let k_hit = p.knowledge == s.gold;
        kl += usize::from(k_hit);
        tp += usize::from(p.topic == s.gold.doc);
        if s.intra_topic() == Some(true) {
            intra += 1;
            intra_hit += usize::from(k_hit);
        }
    }
    let n = samples.len();
    let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    Ok(SelectionMetrics {
        kl: frac(kl),
        tp: frac(tp),
        in_tp: (intra > 0).then(|| intra_hit as f64 / intra as f64),
        n_samples: n,
        n_intra_topic: intra,
    })
}

/// Metrics for one evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    #[serde(flatten)]
    pub selection: SelectionMetrics,
    pub uf1: Option<f64>,
    pub bf1: Option<f64>,
}

impl From<SelectionMetrics> for SplitReport {
    fn from(selection: SelectionMetrics) -> Self {
        Self {
            selection,
            uf1: None,
            bf1: None,
        }
    }
}

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: String,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitReport>,
    /// Set when the run failed; the grid carries on.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: BTreeMap<String, SplitReport>,
    pub rows: Vec<AblationRow>,
}

/// Per-sample dump for error analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted_topic: String,
    pub predicted_knowledge: Label,
    pub gold: Label,
    pub intra_topic: Option<bool>,
}

pub fn prediction_records(predictions: &[Prediction], samples: &[DialogSample]) -> Vec<PredictionRecord> {
    predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| PredictionRecord {
            sample_id: s.sample_id.clone(),
            predicted_topic: p.topic.clone(),
            predicted_knowledge: p.knowledge.clone(),
            gold: s.gold.clone(),
            intra_topic: s.intra_topic(),
        })
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}
