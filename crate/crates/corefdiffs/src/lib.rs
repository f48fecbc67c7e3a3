//! File formats, checkpoints, reports and the command line around
//! [`corefdiffs_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod export;
pub mod io;
pub mod manifest;
pub mod report;

pub use corefdiffs_core;
pub use error::{Error, Result};

use std::sync::Arc;

use corefdiffs_core::corpus::DialogSample;
use corefdiffs_core::graph::{build_graph, CorefMDG, EdgeVocab, GraphResources, GraphVariantConfig};
use corefdiffs_core::model::ModelConfig;
use corefdiffs_core::trainer::{prepare_sample, Pipeline, PreparedSample};
use rayon::prelude::*;

/// [`corefdiffs_core::trainer::prepare_corpus`] across the rayon pool.
/// Output order matches input order.
pub fn prepare_parallel(
    samples: &[DialogSample],
    pipeline: Pipeline<'_>,
    variant: &GraphVariantConfig,
    model: &ModelConfig,
) -> corefdiffs_core::Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| prepare_sample(s, pipeline, variant, model))
        .collect()
}

pub fn build_graphs_parallel(
    samples: &[DialogSample],
    resources: &GraphResources,
    vocab: &Arc<EdgeVocab>,
    variant: &GraphVariantConfig,
) -> corefdiffs_core::Result<Vec<CorefMDG>> {
    samples
        .par_iter()
        .map(|s| build_graph(s, resources, variant, vocab))
        .collect()
}
