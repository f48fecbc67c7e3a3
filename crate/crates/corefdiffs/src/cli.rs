//! Command line. Exit codes: 0 success, 1 invalid invocation or
//! configuration, 2 failure while running.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corefdiffs_core::corpus::{build_relation_table, CorefIndex, DialogSample, LemmaTable, RelationTable};
use corefdiffs_core::encoder::{EmbeddingProvider, HashingFeaturizer};
use corefdiffs_core::eval::{generation_metrics, prediction_records, EvalReport, SplitReport};
use corefdiffs_core::graph::{graph_stats, EdgeVocab, GraphResources, GraphVariantConfig, KnowledgeEdges, DEFAULT_J_MAX};
use corefdiffs_core::trainer::{evaluate, predict_all, run_ablation_row, train, GridEntry, Pipeline, TrainConfig};
use corefdiffs_core::corpus::generate_synthetic_corpus;
use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_settings, merge, Settings};
use crate::embeddings::FileProvider;
use crate::error::Error;
use crate::export::{file_stem, to_dot, GraphJson};
use crate::io::{load_coref, load_corpus, load_entities, load_lemmas, load_relations, read_json, save_coref, save_corpus, save_lemmas, save_relations, write_json, write_text};
use crate::manifest::Manifest;
use crate::report;
use crate::{build_graphs_parallel, prepare_parallel};

#[derive(Debug, Parser)]
#[command(name = "corefdiffs", version, about = "Coreference graphs and differential knowledge selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Settings file (or a previous run's manifest.json). Flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for graph building and grid rows; 0 = all cores.
    #[arg(long, env = "COREFDIFFS_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long, env = "COREFDIFFS_LOG", default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Args)]
pub struct Run {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the generic and coreference-discriminative synthetic corpora.
    SynthGen(Run),
    /// Build one graph per sample and export DOT and/or JSON.
    BuildGraph {
        #[command(flatten)]
        run: Run,
        #[arg(long, value_enum, default_value_t = GraphFormat::Both)]
        format: GraphFormat,
    },
    /// Mean vertex and edge counts per graph.
    GraphStats {
        #[command(flatten)]
        run: Run,
        /// Every named variant instead of `--variant`.
        #[arg(long)]
        all_variants: bool,
    },
    Train(Run),
    /// Score a checkpoint on `--corpus` (and `--test-corpus`).
    Eval(Run),
    /// Train and score one run per entry of `--grid`.
    Ablate(Run),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::BuildGraph { .. } => "build-graph",
            Command::GraphStats { .. } => "graph-stats",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }

    fn run_args(&self) -> &Run {
        match self {
            Command::SynthGen(r) | Command::Train(r) | Command::Eval(r) | Command::Ablate(r) => r,
            Command::BuildGraph { run, .. } | Command::GraphStats { run, .. } => run,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<corefdiffs_core::Error> for Failure {
    fn from(e: corefdiffs_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let common = &cli.command.run_args().common;
    let _ = env_logger::Builder::new()
        .parse_filters(&common.log_level)
        .format_timestamp(None)
        .try_init();
    let result = if common.threads > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(common.threads).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(Failure::Invalid(format!("--threads: {e}"))),
        }
    } else {
        dispatch(&cli.command)
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: &Command) -> Outcome {
    let run = cmd.run_args();
    let settings = match &run.common.config {
        Some(path) => {
            let file = load_settings(path).map_err(invalid)?;
            let (merged, warnings) = merge(&file, &run.settings);
            for w in warnings {
                warn!("{w}");
            }
            merged
        }
        None => run.settings.clone(),
    };
    let ctx = Ctx {
        command: cmd.name(),
        out: run.common.out.clone(),
        settings,
    };
    match cmd {
        Command::SynthGen(_) => synth_gen(&ctx),
        Command::BuildGraph { format, .. } => build_graph_cmd(&ctx, *format),
        Command::GraphStats { all_variants, .. } => graph_stats_cmd(&ctx, *all_variants),
        Command::Train(_) => train_cmd(&ctx),
        Command::Eval(_) => eval_cmd(&ctx),
        Command::Ablate(_) => ablate_cmd(&ctx),
    }
}

struct Ctx {
    command: &'static str,
    out: PathBuf,
    settings: Settings,
}

impl Ctx {
    fn manifest(&self) -> Manifest {
        Manifest::new(self.command, &self.out, &self.settings)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn existing<'a>(path: &'a Option<PathBuf>, flag: &str) -> Outcome<Option<&'a Path>> {
    match path {
        Some(p) if !p.is_file() => Err(invalid(format!("--{flag}: no such file `{}`", p.display()))),
        Some(p) => Ok(Some(p)),
        None => Ok(None),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str, why: &str) -> Outcome<&'a Path> {
    existing(path, flag)?.ok_or_else(|| invalid(format!("missing --{flag} ({why})")))
}

/// Checks the side tables a set of graph variants needs.
fn check_resources(s: &Settings, variants: &[GraphVariantConfig]) -> Outcome {
    existing(&s.lemmas, "lemmas")?;
    existing(&s.coref, "coref")?;
    existing(&s.relations, "relations")?;
    existing(&s.entities, "entities")?;
    if variants.iter().any(|v| v.uses_commonsense()) && s.relations.is_none() {
        required(&s.relations, "relations", "commonsense edges are enabled")?;
    }
    let needs_coref = variants
        .iter()
        .any(|v| matches!(v.knowledge_edges, KnowledgeEdges::CoreferenceLink));
    if needs_coref && s.coref.is_none() && !s.coref_fallback.unwrap_or(false) {
        required(&s.coref, "coref", "coreference edges are enabled; or pass --coref-fallback")?;
    }
    Ok(())
}

struct Loaded {
    resources: GraphResources,
    vocab: Arc<EdgeVocab>,
}

fn load_resources(s: &Settings, corpora: &[&[DialogSample]], manifest: &mut Manifest) -> Outcome<Loaded> {
    let relations = match &s.relations {
        Some(p) => {
            manifest.add_input(p)?;
            build_relation_table(&load_relations(p)?, s.keep_relations())
        }
        None => RelationTable::default(),
    };
    let lemmas = match &s.lemmas {
        Some(p) => {
            manifest.add_input(p)?;
            load_lemmas(p)?
        }
        None => LemmaTable::default(),
    };
    let docs: Vec<_> = corpora.iter().flat_map(|c| c.iter()).flat_map(|s| &s.documents).collect();
    let coref = match &s.coref {
        Some(p) => {
            manifest.add_input(p)?;
            let known: BTreeSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
            let (used, skipped): (Vec<_>, Vec<_>) = load_coref(p)?
                .into_iter()
                .partition(|a| known.contains(a.doc_id.as_str()));
            if !skipped.is_empty() {
                info!("{} coreference annotations refer to documents outside the loaded corpora", skipped.len());
            }
            CorefIndex::new(used, docs.iter().copied())?
        }
        None => CorefIndex::default(),
    };
    let entities = match &s.entities {
        Some(p) => {
            manifest.add_input(p)?;
            load_entities(p)?
        }
        None => BTreeMap::new(),
    };
    let vocab = Arc::new(EdgeVocab::for_relations(&relations, DEFAULT_J_MAX));
    Ok(Loaded {
        resources: GraphResources {
            relations,
            lemmas,
            coref,
            coref_fallback: s.coref_fallback.unwrap_or(false),
            entities,
        },
        vocab,
    })
}

fn load_split(s: &Settings, path: &Path, manifest: &mut Manifest) -> Outcome<Vec<DialogSample>> {
    let schema = s.schema().map_err(invalid)?;
    manifest.add_input(path)?;
    Ok(load_corpus(path, &schema)?)
}

fn provider(s: &Settings, config: &mut TrainConfig, manifest: &mut Manifest) -> Outcome<Box<dyn EmbeddingProvider>> {
    let p: Box<dyn EmbeddingProvider> = match existing(&s.embeddings, "embeddings")? {
        Some(path) => {
            manifest.add_input(path)?;
            let f = FileProvider::load(path)?;
            match s.d_init {
                Some(d) if d != f.dim() => {
                    return Err(invalid(format!(
                        "--d-init {d} does not match the embedding file dimension {}",
                        f.dim()
                    )))
                }
                _ => config.model.d_init = f.dim(),
            }
            Box::new(f)
        }
        None => Box::new(
            HashingFeaturizer::new(config.model.d_init, s.featurizer_seed())
                .map_err(|e| invalid(e.to_string()))?,
        ),
    };
    manifest.provider = Some(p.id());
    Ok(p)
}

fn synth_gen(ctx: &Ctx) -> Outcome {
    let s = &ctx.settings;
    let spec = s.synth_spec().map_err(invalid)?;
    let seed = s.seed.unwrap_or(0);
    let b = generate_synthetic_corpus(seed, &spec);
    save_corpus(&ctx.path("generic/train.json"), &b.generic_train)?;
    save_corpus(&ctx.path("generic/test.json"), &b.generic_test)?;
    save_corpus(&ctx.path("coref/train.json"), &b.coref_train)?;
    save_corpus(&ctx.path("coref/test.json"), &b.coref_test)?;
    save_coref(&ctx.path("coref.json"), &b.annotations)?;
    save_relations(&ctx.path("relations.tsv"), &b.raw_relations)?;
    save_lemmas(&ctx.path("lemmas.tsv"), &b.lemmas)?;
    write_json(&ctx.path("spec.json"), &spec)?;
    let mut m = ctx.manifest();
    m.seed = Some(seed);
    m.write()?;
    info!(
        "wrote {} + {} generic and {} + {} coreference samples to {}",
        b.generic_train.len(),
        b.generic_test.len(),
        b.coref_train.len(),
        b.coref_test.len(),
        ctx.out.display()
    );
    Ok(())
}

fn build_graph_cmd(ctx: &Ctx, format: GraphFormat) -> Outcome {
    let s = &ctx.settings;
    let corpus = required(&s.corpus, "corpus", "samples to build graphs for")?;
    let variant = s.variant().map_err(invalid)?;
    check_resources(s, &[variant])?;
    let mut m = ctx.manifest();
    let samples = load_split(s, corpus, &mut m)?;
    let res = load_resources(s, &[&samples], &mut m)?;
    let graphs = build_graphs_parallel(&samples, &res.resources, &res.vocab, &variant)?;
    let mut used = BTreeSet::new();
    for (i, g) in graphs.iter().enumerate() {
        let mut stem = file_stem(&g.sample_id);
        if !used.insert(stem.clone()) {
            stem = format!("{stem}-{i}");
            used.insert(stem.clone());
        }
        if format != GraphFormat::Json {
            write_text(&ctx.path(&format!("graphs/{stem}.dot")), &to_dot(g))?;
        }
        if format != GraphFormat::Dot {
            write_json(&ctx.path(&format!("graphs/{stem}.json")), &GraphJson::from(g))?;
        }
    }
    m.write()?;
    info!("built {} graphs", graphs.len());
    Ok(())
}

fn graph_stats_cmd(ctx: &Ctx, all: bool) -> Outcome {
    let s = &ctx.settings;
    let corpus = required(&s.corpus, "corpus", "samples to build graphs for")?;
    let names: Vec<String> = if all {
        GraphVariantConfig::NAMES.iter().map(|n| n.to_string()).collect()
    } else {
        vec![s.variant.clone().unwrap_or_else(|| "full".into())]
    };
    let variants = names
        .iter()
        .map(|n| GraphVariantConfig::named(n).ok_or_else(|| invalid(format!("unknown graph variant `{n}`"))))
        .collect::<Outcome<Vec<_>>>()?;
    check_resources(s, &variants)?;
    let mut m = ctx.manifest();
    let samples = load_split(s, corpus, &mut m)?;
    let res = load_resources(s, &[&samples], &mut m)?;
    let mut rows = Vec::new();
    for (name, v) in names.iter().zip(&variants) {
        let graphs = build_graphs_parallel(&samples, &res.resources, &res.vocab, v)?;
        rows.push((name.clone(), graph_stats(&graphs)?));
    }
    write_json(&ctx.path("graph_stats.json"), &rows)?;
    let csv = report::graph_stats_csv(&rows)?;
    write_text(&ctx.path("graph_stats.csv"), &csv)?;
    print!("{csv}");
    m.write()?;
    Ok(())
}

fn train_cmd(ctx: &Ctx) -> Outcome {
    let s = &ctx.settings;
    let corpus = required(&s.corpus, "corpus", "training samples")?;
    let test = existing(&s.test_corpus, "test-corpus")?;
    let mut config = s.train_config().map_err(invalid)?;
    check_resources(s, &[config.variant])?;
    let mut m = ctx.manifest();
    let provider = provider(s, &mut config, &mut m)?;
    let train_s = load_split(s, corpus, &mut m)?;
    let test_s = match test {
        Some(p) => load_split(s, p, &mut m)?,
        None => Vec::new(),
    };
    let res = load_resources(s, &[&train_s, &test_s], &mut m)?;
    let pipeline = Pipeline {
        resources: &res.resources,
        vocab: &res.vocab,
        provider: provider.as_ref(),
    };
    let train_p = prepare_parallel(&train_s, pipeline, &config.variant, &config.model)?;
    let test_p = prepare_parallel(&test_s, pipeline, &config.variant, &config.model)?;
    let heldout = (!test_p.is_empty()).then_some(test_p.as_slice());
    info!("training on {} samples for up to {} epochs", train_p.len(), config.epochs);
    let outcome = train(&config, &res.vocab, &train_p, heldout)?;
    save_checkpoint(&ctx.path("best.ckpt"), &outcome.best, &config)?;
    save_checkpoint(&ctx.path("last.ckpt"), &outcome.last, &config)?;
    report::write_trace(&ctx.path("trace.jsonl"), &outcome.trace)?;
    let mut splits: BTreeMap<String, SplitReport> = BTreeMap::new();
    splits.insert("train".into(), evaluate(&outcome.best.model, &train_p)?.into());
    if let Some(h) = heldout {
        splits.insert("test".into(), evaluate(&outcome.best.model, h)?.into());
    }
    write_json(&ctx.path("metrics.json"), &EvalReport { splits: splits.clone(), rows: vec![] })?;
    for (name, r) in &splits {
        info!("{name}: KL {:.4} TP {:.4}", r.selection.kl, r.selection.tp);
    }
    m.config_hash = Some(format!("{:016x}", config.fingerprint()));
    m.seed = Some(config.seed);
    m.write()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationRecord {
    sample: String,
    hypothesis: String,
    reference: String,
}

fn load_generations(path: &Path) -> Outcome<Vec<GenerationRecord>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Failure::Runtime(Error::Format {
                    path: path.into(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

fn eval_cmd(ctx: &Ctx) -> Outcome {
    let s = &ctx.settings;
    let corpus = required(&s.corpus, "corpus", "samples to evaluate")?;
    let ckpt_path = required(&s.checkpoint, "checkpoint", "the model to evaluate")?;
    let test = existing(&s.test_corpus, "test-corpus")?;
    let generations = existing(&s.generations, "generations")?;
    let mut m = ctx.manifest();
    m.add_input(ckpt_path)?;
    let stored = load_checkpoint(ckpt_path)?;
    let mut config = stored.train_config.clone();
    let shape = [s.d_init, s.d_g, s.d_e, s.heads, s.layers, s.gru_layers, s.history];
    if shape.iter().any(Option::is_some) {
        warn!("model dimensions come from the checkpoint; dimension flags are ignored");
    }
    if s.variant.is_some() {
        config.variant = s.variant().map_err(invalid)?;
    }
    check_resources(s, &[config.variant])?;
    let mut probe = config.clone();
    let provider = provider(s, &mut probe, &mut m)?;
    if provider.dim() != config.model.d_init {
        return Err(invalid(format!(
            "embedding dimension {} does not match the checkpoint's d_init {}",
            provider.dim(),
            config.model.d_init
        )));
    }
    let mut splits_in: Vec<(String, Vec<DialogSample>)> = vec![("corpus".into(), load_split(s, corpus, &mut m)?)];
    if let Some(p) = test {
        splits_in.push(("test".into(), load_split(s, p, &mut m)?));
    }
    let gens = match generations {
        Some(p) => {
            m.add_input(p)?;
            load_generations(p)?
        }
        None => Vec::new(),
    };
    let all: Vec<&[DialogSample]> = splits_in.iter().map(|(_, v)| v.as_slice()).collect();
    let res = load_resources(s, &all, &mut m)?;
    stored.check_compatible(&res.vocab, Some(&config.model))?;
    let model = &stored.checkpoint.model;
    let pipeline = Pipeline {
        resources: &res.resources,
        vocab: &res.vocab,
        provider: provider.as_ref(),
    };
    let mut report_out = EvalReport::default();
    for (name, samples) in &splits_in {
        let prepared = prepare_parallel(samples, pipeline, &config.variant, &config.model)?;
        let preds = predict_all(model, &prepared)?;
        let metrics = corefdiffs_core::eval::selection_metrics(&preds, samples)?;
        let mut rep = SplitReport::from(metrics);
        let ids: BTreeSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        let pairs = gens
            .iter()
            .filter(|g| ids.contains(g.sample.as_str()))
            .map(|g| (g.hypothesis.as_str(), g.reference.as_str()));
        if let Some((u, b)) = generation_metrics(pairs) {
            rep.uf1 = Some(u);
            rep.bf1 = Some(b);
        }
        report::write_predictions(&ctx.path(&format!("predictions_{name}.jsonl")), &prediction_records(&preds, samples))?;
        info!("{name}: KL {:.4} TP {:.4}", rep.selection.kl, rep.selection.tp);
        report_out.splits.insert(name.clone(), rep);
    }
    write_json(&ctx.path("report.json"), &report_out)?;
    write_text(&ctx.path("report.csv"), &report::splits_csv(&report_out.splits)?)?;
    m.config_hash = Some(format!("{:016x}", stored.checkpoint.config_hash));
    m.seed = Some(config.seed);
    m.write()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridFile {
    List(Vec<GridEntry>),
    Wrapped { grid: Vec<GridEntry> },
}

fn ablate_cmd(ctx: &Ctx) -> Outcome {
    let s = &ctx.settings;
    let corpus = required(&s.corpus, "corpus", "training samples")?;
    let grid_path = required(&s.grid, "grid", "the variants to run")?;
    let test = existing(&s.test_corpus, "test-corpus")?;
    let mut config = s.train_config().map_err(invalid)?;
    let grid = match read_json::<GridFile>(grid_path).map_err(|e| invalid(e.to_string()))? {
        GridFile::List(g) | GridFile::Wrapped { grid: g } => g,
    };
    if grid.is_empty() {
        return Err(invalid(format!("{}: ablation grid is empty", grid_path.display())));
    }
    // Unknown names become failed rows rather than aborting the grid.
    let variants: Vec<GraphVariantConfig> = grid.iter().filter_map(|e| GraphVariantConfig::named(&e.variant)).collect();
    check_resources(s, &variants)?;
    let mut m = ctx.manifest();
    m.add_input(grid_path)?;
    let provider = provider(s, &mut config, &mut m)?;
    let train_s = load_split(s, corpus, &mut m)?;
    let test_s = match test {
        Some(p) => load_split(s, p, &mut m)?,
        None => Vec::new(),
    };
    let res = load_resources(s, &[&train_s, &test_s], &mut m)?;
    let pipeline = Pipeline {
        resources: &res.resources,
        vocab: &res.vocab,
        provider: provider.as_ref(),
    };
    let rows: Vec<_> = grid
        .par_iter()
        .map(|e| run_ablation_row(&config, e, pipeline, &train_s, &test_s))
        .collect();
    for r in &rows {
        if let Some(e) = &r.error {
            warn!("row {} / {} failed: {e}", r.variant, r.ablation);
        }
    }
    write_text(&ctx.path("ablation.csv"), &report::ablation_csv(&rows)?)?;
    write_text(&ctx.path("ablation.json"), &report::ablation_json(&rows))?;
    let split = if test_s.is_empty() { "train" } else { "test" };
    print!("{}", report::ablation_table(&rows, split));
    m.config_hash = Some(format!("{:016x}", config.fingerprint()));
    m.seed = Some(config.seed);
    m.write()?;
    Ok(())
}
