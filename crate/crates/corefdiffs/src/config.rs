//! Run settings: one flat key set shared by the config file and the flags.
//!
//! Every key is optional. A config file (or a run manifest, whose `settings`
//! object has the same shape) supplies values, flags override them, and the
//! resolved set is echoed into the manifest of the run.

use std::path::{Path, PathBuf};

use clap::Args;
use corefdiffs_core::corpus::{SynthSpec, TopicSplit};
use corefdiffs_core::graph::GraphVariantConfig;
use corefdiffs_core::model::{Ablation, Profile};
use corefdiffs_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::io::CorpusSchema;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Training (or evaluated) corpus JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Held-out corpus JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_corpus: Option<PathBuf>,
    /// Coreference annotations JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coref: Option<PathBuf>,
    /// Relation table TSV (topic_a, topic_b, relation).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relations: Option<PathBuf>,
    /// Lemma table TSV (token, lemma).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<PathBuf>,
    /// Per-segment entity sets JSON for common-entity edges. Documents not
    /// listed use the capitalized-run extractor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entities: Option<PathBuf>,
    /// Precomputed embeddings (JSON lines). Without it, the hashing
    /// featurizer is used.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Ablation grid JSON.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    /// Generated responses (JSON lines of {sample, hypothesis, reference}).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generations: Option<PathBuf>,

    /// desk or paper.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_init: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_g: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_e: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_layers: Option<usize>,
    /// History length (also the shift-sequence length).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<usize>,
    /// Graph variant: full, wo_tp, wo_tp_overlap, wo_tp_wikigraph, wo_kg,
    /// kg_common_entity, kg_partial_order, wo_tp_kg.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Component ablation: none, no_diff_seq, no_diff, no_res_rgat.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<String>,
    /// Most frequent relation names kept; the rest become `others`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_relations: Option<usize>,
    /// Annotate documents without coreference chains by exact matching.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coref_fallback: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub featurizer_seed: Option<u64>,
    /// multi_doc, or single_doc to split each document into pseudo-topics.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    /// Pseudo-topic split for single_doc corpora (config file only).
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic_split: Option<TopicSplit>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_docs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_segments: Option<usize>,
}

pub const DEFAULT_KEEP_RELATIONS: usize = 350;

/// Reads a settings file. A run manifest is accepted too; its `settings`
/// object is used.
pub fn load_settings(path: &Path) -> Result<Settings, String> {
    let err = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
    let text = std::fs::read_to_string(path).map_err(|e| err(&e))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| err(&e))?;
    if v.get("command").is_some() {
        v = v.get_mut("settings").map(Value::take).unwrap_or_default();
    }
    serde_json::from_value(v).map_err(|e| err(&e))
}

/// Flags win over the file. Each key set on both sides with different
/// values yields a warning.
pub fn merge(file: &Settings, flags: &Settings) -> (Settings, Vec<String>) {
    let to_map = |s: &Settings| match serde_json::to_value(s).expect("settings serialize") {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    let mut out: Map<String, Value> = to_map(file);
    let mut warnings = Vec::new();
    for (k, v) in to_map(flags) {
        if let Some(old) = out.get(&k) {
            if *old != v {
                warnings.push(format!("`{k}`: flag value {v} overrides config value {old}"));
            }
        }
        out.insert(k, v);
    }
    let merged = serde_json::from_value(Value::Object(out)).expect("merged settings deserialize");
    (merged, warnings)
}

impl Settings {
    pub fn profile(&self) -> Result<Profile, String> {
        match self.profile.as_deref().unwrap_or("desk") {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            p => Err(format!("unknown profile `{p}` (expected desk or paper)")),
        }
    }

    pub fn variant(&self) -> Result<GraphVariantConfig, String> {
        let name = self.variant.as_deref().unwrap_or("full");
        GraphVariantConfig::named(name).ok_or_else(|| {
            format!(
                "unknown graph variant `{name}` (expected one of {})",
                GraphVariantConfig::NAMES.join(", ")
            )
        })
    }

    pub fn ablation(&self) -> Result<Ablation, String> {
        let name = self.ablation.as_deref().unwrap_or("none");
        Ablation::from_name(name).ok_or_else(|| format!("unknown ablation `{name}`"))
    }

    /// Profile defaults with every explicitly set key applied.
    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let mut c = TrainConfig::profile(self.profile()?);
        let m = &mut c.model;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(m.d_init, self.d_init);
        set!(m.d_g, self.d_g);
        set!(m.d_e, self.d_e);
        set!(m.heads, self.heads);
        set!(m.layers, self.layers);
        set!(m.gru_layers, self.gru_layers);
        set!(m.history, self.history);
        m.ablation = self.ablation()?;
        set!(c.seed, self.seed);
        set!(c.lr, self.lr);
        set!(c.warmup, self.warmup);
        set!(c.epochs, self.epochs);
        if self.decay_steps.is_some() {
            c.decay_steps = self.decay_steps;
        }
        if let Some(p) = self.patience {
            c.patience = (p > 0).then_some(p);
        }
        if self.target_accuracy.is_some() {
            c.target_accuracy = self.target_accuracy;
        }
        c.variant = self.variant()?;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn schema(&self) -> Result<CorpusSchema, String> {
        match self.schema.as_deref().unwrap_or("multi_doc") {
            "multi_doc" => Ok(CorpusSchema::MultiDoc),
            "single_doc" => Ok(CorpusSchema::SingleDoc {
                split: self.topic_split.clone().unwrap_or_default(),
            }),
            s => Err(format!("unknown corpus schema `{s}` (expected multi_doc or single_doc)")),
        }
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, String> {
        let mut s = SynthSpec::default();
        if let Some(v) = self.train_samples {
            s.train_samples = v;
        }
        if let Some(v) = self.test_samples {
            s.test_samples = v;
        }
        if let Some(v) = self.max_docs {
            s.max_docs = v;
        }
        if let Some(v) = self.max_segments {
            s.max_segments = v;
        }
        if s.max_docs == 0 || s.max_segments == 0 {
            return Err("max_docs and max_segments must be at least 1".into());
        }
        Ok(s)
    }

    pub fn keep_relations(&self) -> usize {
        self.keep_relations.unwrap_or(DEFAULT_KEEP_RELATIONS)
    }

    pub fn featurizer_seed(&self) -> u64 {
        self.featurizer_seed.unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_wins_with_warning() {
        let file = Settings {
            lr: Some(1e-5),
            epochs: Some(3),
            ..Settings::default()
        };
        let flags = Settings {
            lr: Some(1e-4),
            ..Settings::default()
        };
        let (m, w) = merge(&file, &flags);
        assert_eq!((m.lr, m.epochs), (Some(1e-4), Some(3)));
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("lr"));
        assert_eq!(m.train_config().unwrap().lr, 1e-4);
    }

    #[test]
    fn profiles_set_dims_and_warmup() {
        let paper = Settings {
            profile: Some("paper".into()),
            ..Settings::default()
        }
        .train_config()
        .unwrap();
        let m = &paper.model;
        assert_eq!((m.d_init, m.d_g, m.d_e, m.heads, paper.warmup), (320, 1024, 64, 8, 5000));
        let desk = Settings::default().train_config().unwrap();
        assert_eq!(desk.warmup, 50);
        assert!(desk.model.d_g < 1024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Settings>(r#"{"learning_rate": 1}"#).is_err());
        assert!(Settings {
            variant: Some("nope".into()),
            ..Settings::default()
        }
        .train_config()
        .is_err());
    }

    #[test]
    fn zero_patience_disables_early_stopping() {
        let c = Settings {
            patience: Some(0),
            ..Settings::default()
        };
        assert_eq!(c.train_config().unwrap().patience, None);
    }
}
