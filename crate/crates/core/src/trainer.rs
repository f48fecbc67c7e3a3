//! Training loop, evaluation and the ablation grid runner.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogSample, Label};
use crate::encoder::{encode_vertices, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::eval::{selection_metrics, AblationRow, Prediction, SelectionMetrics, SplitReport};
use crate::graph::{build_graph, CorefMDG, EdgeVocab, GraphResources, GraphVariantConfig};
use crate::model::{history_sequence, Ablation, Model, ModelConfig, Profile, Targets, Topology};
use crate::optim::{Adam, LinearSchedule};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub warmup: u64,
    /// Step at which the rate decays to zero; defaults to
    /// `epochs × training samples`.
    pub decay_steps: Option<u64>,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without improvement of the monitored knowledge accuracy before
    /// stopping; `None` disables early stopping.
    pub patience: Option<usize>,
    /// Stop as soon as training KL and TP both reach this value.
    pub target_accuracy: Option<f64>,
    pub variant: GraphVariantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (lr, warmup) = match profile {
            Profile::Desk => (1e-3, 50),
            Profile::Paper => (1e-5, 5000),
        };
        Self {
            model: ModelConfig::profile(profile),
            lr,
            warmup,
            decay_steps: None,
            epochs: 20,
            seed: 0,
            patience: Some(10),
            target_accuracy: None,
            variant: GraphVariantConfig::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the full configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(format!("{self:?}").as_bytes());
        h.finish()
    }
}

/// A sample with its graph, `H⁰` and loss targets, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sample: DialogSample,
    pub graph: CorefMDG,
    pub topology: Topology,
    pub h0: Matrix,
    pub targets: Targets,
}

/// Shared, immutable inputs for turning samples into model inputs.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub resources: &'a GraphResources,
    pub vocab: &'a Arc<EdgeVocab>,
    pub provider: &'a dyn EmbeddingProvider,
}

pub fn prepare_sample(
    sample: &DialogSample,
    pipeline: Pipeline<'_>,
    variant: &GraphVariantConfig,
    model: &ModelConfig,
) -> Result<PreparedSample> {
    sample.validate()?;
    if pipeline.provider.dim() != model.d_init {
        return Err(Error::Dimension {
            context: "provider dimension vs d_init",
            expected: model.d_init,
            actual: pipeline.provider.dim(),
        });
    }
    let graph = build_graph(sample, pipeline.resources, variant, pipeline.vocab)?;
    let h0 = encode_vertices(sample, &graph, pipeline.provider, model.history)?.matrix;
    let knowledge = graph
        .knowledge_vertex(&sample.gold)
        .ok_or_else(|| Error::Label(format!("gold of `{}` has no vertex", sample.sample_id)))?;
    let topic = graph.knowledge_vertices[knowledge - graph.num_topics()].parent;
    let targets = Targets {
        topic,
        knowledge,
        history: history_sequence(sample, &graph, model.history, model.history),
    };
    Ok(PreparedSample {
        sample: sample.clone(),
        topology: Topology::from_graph(&graph),
        graph,
        h0,
        targets,
    })
}

pub fn prepare_corpus(
    samples: &[DialogSample],
    pipeline: Pipeline<'_>,
    variant: &GraphVariantConfig,
    model: &ModelConfig,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| prepare_sample(s, pipeline, variant, model))
        .collect()
}

pub fn predict(model: &Model, prepared: &PreparedSample) -> Result<Prediction> {
    let out = model.forward(&prepared.topology, &prepared.h0, &prepared.targets.history)?;
    let (t, k) = out.argmax();
    let g = &prepared.graph;
    let kv = &g.knowledge_vertices[k - g.num_topics()];
    Ok(Prediction {
        sample_id: prepared.sample.sample_id.clone(),
        topic: g.topic_vertices[t].doc_id.clone(),
        knowledge: Label::new(kv.doc_id.clone(), kv.index),
    })
}

pub fn predict_all(model: &Model, prepared: &[PreparedSample]) -> Result<Vec<Prediction>> {
    prepared.iter().map(|p| predict(model, p)).collect()
}

pub fn evaluate(model: &Model, prepared: &[PreparedSample]) -> Result<SelectionMetrics> {
    let preds = predict_all(model, prepared)?;
    let samples: Vec<DialogSample> = prepared.iter().map(|p| p.sample.clone()).collect();
    selection_metrics(&preds, &samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Filled on the last step of each epoch.
    pub kl: Option<f64>,
    pub tp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    pub config_hash: u64,
    pub edge_vocab: Vec<String>,
    pub metrics: Option<SelectionMetrics>,
}

impl Checkpoint {
    /// Rejects a checkpoint whose edge vocabulary differs from `vocab`.
    pub fn check_vocab(&self, vocab: &EdgeVocab) -> Result<()> {
        let names: Vec<&str> = vocab.types().iter().map(|t| t.name.as_str()).collect();
        if names.len() != self.edge_vocab.len() || names.iter().zip(&self.edge_vocab).any(|(a, b)| a != b) {
            return Err(Error::Config("checkpoint edge vocabulary does not match this run".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// State with the best monitored knowledge accuracy.
    pub best: Checkpoint,
    /// State after the last step.
    pub last: Checkpoint,
    pub trace: Vec<TraceRecord>,
    pub epochs_run: usize,
}

fn model_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

pub fn init_model(config: &TrainConfig, vocab: &EdgeVocab) -> Result<Model> {
    Model::new(config.model.clone(), vocab.len(), model_seed(config.seed))
}

/// Per-sample Adam steps over `train` in a seeded shuffled order. After
/// every epoch the model is scored on `heldout` (or on `train` when there is
/// no held-out split); the best knowledge accuracy is kept.
pub fn train(
    config: &TrainConfig,
    vocab: &EdgeVocab,
    train: &[PreparedSample],
    heldout: Option<&[PreparedSample]>,
) -> Result<TrainOutcome> {
    let model = init_model(config, vocab)?;
    train_from(config, vocab, model, train, heldout)
}

pub fn train_from(
    config: &TrainConfig,
    vocab: &EdgeVocab,
    mut model: Model,
    train: &[PreparedSample],
    heldout: Option<&[PreparedSample]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if model.num_edge_types != vocab.len() {
        return Err(Error::Dimension {
            context: "edge vocabulary",
            expected: vocab.len(),
            actual: model.num_edge_types,
        });
    }
    let schedule = LinearSchedule {
        base_lr: config.lr,
        warmup: config.warmup,
        total: config
            .decay_steps
            .unwrap_or((config.epochs * train.len()) as u64),
    };
    let edge_vocab: Vec<String> = vocab.types().iter().map(|t| t.name.clone()).collect();
    let hash = config.fingerprint();
    let mut opt = Adam::new(model.params.values().iter().map(Matrix::shape));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0u64;
    let snapshot = |model: &Model, opt: &Adam, step: u64, metrics: Option<SelectionMetrics>| Checkpoint {
        model: model.clone(),
        optimizer: opt.clone(),
        step,
        config_hash: hash,
        edge_vocab: edge_vocab.clone(),
        metrics,
    };
    let mut best: Option<Checkpoint> = None;
    let mut best_kl = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            step += 1;
            let lr = schedule.lr(step);
            let s = &train[i];
            let (loss, grads) = model
                .loss_and_gradients(&s.topology, &s.h0, &s.targets)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged {
                        step,
                        detail: format!("non-finite {what} on sample `{}`", s.sample.sample_id),
                    },
                    other => other,
                })?;
            opt.update(model.params.values_mut(), &grads, lr)?;
            trace.push(TraceRecord {
                step,
                epoch,
                loss: loss.total,
                lr,
                kl: None,
                tp: None,
            });
        }
        epochs_run = epoch + 1;
        let monitored = evaluate(&model, heldout.unwrap_or(train))?;
        let train_metrics = match (heldout, config.target_accuracy) {
            (Some(_), Some(_)) => Some(evaluate(&model, train)?),
            (None, _) => Some(monitored.clone()),
            _ => None,
        };
        if let Some(last) = trace.last_mut() {
            last.kl = Some(monitored.kl);
            last.tp = Some(monitored.tp);
        }
        if monitored.kl > best_kl {
            best_kl = monitored.kl;
            stale = 0;
            best = Some(snapshot(&model, &opt, step, Some(monitored.clone())));
        } else {
            stale += 1;
        }
        if let (Some(target), Some(m)) = (config.target_accuracy, &train_metrics) {
            if m.kl >= target && m.tp >= target {
                break;
            }
        }
        if config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    let last = snapshot(&model, &opt, step, None);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        trace,
        epochs_run,
    })
}

/// One entry of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    /// Named graph variant (see [`GraphVariantConfig::named`]).
    pub variant: String,
    #[serde(default)]
    pub ablation: Ablation,
    /// Overrides the base seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GridEntry {
    pub fn new(variant: &str, ablation: Ablation) -> Self {
        Self {
            variant: variant.to_string(),
            ablation,
            seed: None,
        }
    }
}

/// Trains and evaluates one grid row. Failures are recorded in the row.
pub fn run_ablation_row(
    base: &TrainConfig,
    entry: &GridEntry,
    pipeline: Pipeline<'_>,
    train_samples: &[DialogSample],
    test_samples: &[DialogSample],
) -> AblationRow {
    let seed = entry.seed.unwrap_or(base.seed);
    let mut row = AblationRow {
        variant: entry.variant.clone(),
        ablation: entry.ablation.name().to_string(),
        seed,
        splits: BTreeMap::new(),
        error: None,
    };
    let result = (|| -> Result<BTreeMap<String, SplitReport>> {
        let variant = GraphVariantConfig::named(&entry.variant)
            .ok_or_else(|| Error::Config(format!("unknown graph variant `{}`", entry.variant)))?;
        let mut config = base.clone();
        config.seed = seed;
        config.variant = variant;
        config.model.ablation = entry.ablation;
        let train_p = prepare_corpus(train_samples, pipeline, &variant, &config.model)?;
        let test_p = prepare_corpus(test_samples, pipeline, &variant, &config.model)?;
        let heldout = (!test_p.is_empty()).then_some(test_p.as_slice());
        let outcome = train(&config, pipeline.vocab, &train_p, heldout)?;
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), evaluate(&outcome.best.model, &train_p)?.into());
        if !test_p.is_empty() {
            splits.insert("test".to_string(), evaluate(&outcome.best.model, &test_p)?.into());
        }
        Ok(splits)
    })();
    match result {
        Ok(splits) => row.splits = splits,
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every grid entry in order with the shared corpus and base seed.
pub fn ablate(
    base: &TrainConfig,
    grid: &[GridEntry],
    pipeline: Pipeline<'_>,
    train_samples: &[DialogSample],
    test_samples: &[DialogSample],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|e| run_ablation_row(base, e, pipeline, train_samples, test_samples))
        .collect())
}
