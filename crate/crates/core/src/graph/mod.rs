//! Per-sample Coref-MDG construction.
//!
//! Vertex ids are canonical: the `M` topic vertices come first in document
//! order, followed by the `N` knowledge vertices in document order and then
//! segment order. Edges are directed `(src, dst, type)` triples; `dst`
//! aggregates from `src` during propagation. Symmetric relations are stored
//! in both directions and every vertex carries exactly one self loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    fallback_coref, fallback_entities, CorefAnnotation, CorefIndex, DialogSample, Document, Label,
    LemmaTable, RelationTable, OTHERS,
};
use crate::error::{Error, Result};
use crate::text;

pub const DEFAULT_J_MAX: usize = 40;
pub const DEFAULT_PARTIAL_ORDER_HOP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFamily {
    SelfLoop,
    TopicKnowledge,
    TopicTopic,
    KnowledgeKnowledge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeType {
    pub id: usize,
    pub name: String,
    pub family: EdgeFamily,
}

pub const SELF_LOOP: &str = "self_loop";
pub const SENT_MAX: &str = "sent_max";
pub const WORD_OVERLAP: &str = "word_overlap";
pub const COREFERENCE_LINK: &str = "coreference_link";
pub const COMMON_ENTITY: &str = "common_entity";
pub const PARTIAL_ORDER: &str = "partial_order";

/// Frozen edge-type vocabulary. Built once per run from the kept relation
/// names and the sentence-index cap, then shared by every graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeVocab {
    types: Vec<EdgeType>,
    j_max: usize,
}

impl EdgeVocab {
    pub fn new<'a>(kept_relations: impl IntoIterator<Item = &'a String>, j_max: usize) -> Self {
        let mut names: Vec<(String, EdgeFamily)> = Vec::new();
        names.push((SELF_LOOP.into(), EdgeFamily::SelfLoop));
        for j in 1..=j_max {
            names.push((format!("sent_{j}"), EdgeFamily::TopicKnowledge));
        }
        names.push((SENT_MAX.into(), EdgeFamily::TopicKnowledge));
        names.push((WORD_OVERLAP.into(), EdgeFamily::TopicTopic));
        names.push((OTHERS.into(), EdgeFamily::TopicTopic));
        let kept: BTreeSet<&String> = kept_relations.into_iter().collect();
        for r in kept {
            if r != OTHERS {
                names.push((format!("commonsense:{r}"), EdgeFamily::TopicTopic));
            }
        }
        names.push((COREFERENCE_LINK.into(), EdgeFamily::KnowledgeKnowledge));
        names.push((COMMON_ENTITY.into(), EdgeFamily::KnowledgeKnowledge));
        names.push((PARTIAL_ORDER.into(), EdgeFamily::KnowledgeKnowledge));
        let types = names
            .into_iter()
            .enumerate()
            .map(|(id, (name, family))| EdgeType { id, name, family })
            .collect();
        Self { types, j_max }
    }

    pub fn for_relations(table: &RelationTable, j_max: usize) -> Self {
        Self::new(table.kept_relations(), j_max)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn types(&self) -> &[EdgeType] {
        &self.types
    }

    pub fn get(&self, id: usize) -> Option<&EdgeType> {
        self.types.get(id)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.types[id].name
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    fn fixed(&self, name: &str) -> usize {
        self.id(name).expect("built-in edge type")
    }

    pub fn self_loop(&self) -> usize {
        0
    }

    /// `sent_j` for 1-based `j`, capped at `sent_max`.
    pub fn sent(&self, j: usize) -> usize {
        if (1..=self.j_max).contains(&j) {
            j
        } else {
            self.j_max + 1
        }
    }

    pub fn word_overlap(&self) -> usize {
        self.j_max + 2
    }

    pub fn others(&self) -> usize {
        self.j_max + 3
    }

    /// Type for a folded relation name; unknown names fall back to `others`.
    pub fn commonsense(&self, relation: &str) -> usize {
        if relation == OTHERS {
            return self.others();
        }
        self.id(&format!("commonsense:{relation}")).unwrap_or_else(|| self.others())
    }

    pub fn coreference_link(&self) -> usize {
        self.fixed(COREFERENCE_LINK)
    }

    pub fn common_entity(&self) -> usize {
        self.fixed(COMMON_ENTITY)
    }

    pub fn partial_order(&self) -> usize {
        self.fixed(PARTIAL_ORDER)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub ty: usize,
}

impl Edge {
    pub fn new(src: usize, dst: usize, ty: usize) -> Self {
        Self { src, dst, ty }
    }
}

fn both_ways(a: usize, b: usize, ty: usize, out: &mut Vec<Edge>) {
    out.push(Edge::new(a, b, ty));
    out.push(Edge::new(b, a, ty));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KnowledgeEdges {
    CoreferenceLink,
    CommonEntity,
    PartialOrder { hop: usize },
    None,
}

/// Which edge families a graph carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphVariantConfig {
    pub topic_knowledge_edges: bool,
    pub topic_edges: bool,
    pub word_overlap: bool,
    pub commonsense: bool,
    pub knowledge_edges: KnowledgeEdges,
}

impl Default for GraphVariantConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl GraphVariantConfig {
    pub const fn full() -> Self {
        Self {
            topic_knowledge_edges: true,
            topic_edges: true,
            word_overlap: true,
            commonsense: true,
            knowledge_edges: KnowledgeEdges::CoreferenceLink,
        }
    }

    /// Named variants: the full graph plus the seven structural comparisons.
    pub fn named(name: &str) -> Option<Self> {
        let full = Self::full();
        Some(match name {
            "full" => full,
            "wo_tp" => Self { topic_edges: false, ..full },
            "wo_tp_overlap" => Self { word_overlap: false, ..full },
            "wo_tp_wikigraph" => Self { commonsense: false, ..full },
            "wo_kg" => Self { knowledge_edges: KnowledgeEdges::None, ..full },
            "kg_common_entity" => Self { knowledge_edges: KnowledgeEdges::CommonEntity, ..full },
            "kg_partial_order" => Self {
                knowledge_edges: KnowledgeEdges::PartialOrder { hop: DEFAULT_PARTIAL_ORDER_HOP },
                ..full
            },
            "wo_tp_kg" => Self { topic_knowledge_edges: false, ..full },
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 8] = [
        "full",
        "wo_tp",
        "wo_tp_overlap",
        "wo_tp_wikigraph",
        "wo_kg",
        "kg_common_entity",
        "kg_partial_order",
        "wo_tp_kg",
    ];

    pub fn uses_word_overlap(&self) -> bool {
        self.topic_edges && self.word_overlap
    }

    pub fn uses_commonsense(&self) -> bool {
        self.topic_edges && self.commonsense
    }
}

/// Side resources shared by every graph build. Immutable after construction.
#[derive(Clone, Debug, Default)]
pub struct GraphResources {
    pub relations: RelationTable,
    pub lemmas: LemmaTable,
    pub coref: CorefIndex,
    /// Run the exact-match fallback annotator on documents without an
    /// annotation.
    pub coref_fallback: bool,
    /// Per-segment entity sets by document; documents missing here use the
    /// capitalized-run extractor.
    pub entities: BTreeMap<String, Vec<BTreeSet<String>>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicVertex {
    pub doc_id: String,
    pub topic: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeVertex {
    pub doc_id: String,
    /// 1-based segment index.
    pub index: usize,
    /// Vertex id of the owning topic.
    pub parent: usize,
    /// Type id of the `sent_j` edge to the parent.
    pub sent_type: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorefMDG {
    pub sample_id: String,
    pub topic_vertices: Vec<TopicVertex>,
    pub knowledge_vertices: Vec<KnowledgeVertex>,
    pub edges: Vec<Edge>,
    pub vocab: Arc<EdgeVocab>,
}

impl CorefMDG {
    pub fn num_topics(&self) -> usize {
        self.topic_vertices.len()
    }

    pub fn num_knowledge(&self) -> usize {
        self.knowledge_vertices.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_topics() + self.num_knowledge()
    }

    pub fn is_topic(&self, v: usize) -> bool {
        v < self.num_topics()
    }

    pub fn topic_index(&self, doc_id: &str) -> Option<usize> {
        self.topic_vertices.iter().position(|t| t.doc_id == doc_id)
    }

    /// Position of a label among the knowledge vertices (0..N).
    pub fn knowledge_index(&self, label: &Label) -> Option<usize> {
        self.knowledge_vertices
            .iter()
            .position(|k| k.doc_id == label.doc && k.index == label.sent)
    }

    pub fn knowledge_vertex(&self, label: &Label) -> Option<usize> {
        self.knowledge_index(label).map(|i| i + self.num_topics())
    }

    pub fn vertex_name(&self, v: usize) -> String {
        if self.is_topic(v) {
            format!("topic:{}", self.topic_vertices[v].doc_id)
        } else {
            let k = &self.knowledge_vertices[v - self.num_topics()];
            format!("knowledge:{}:{}", k.doc_id, k.index)
        }
    }
}

pub fn self_loops(num_vertices: usize, vocab: &EdgeVocab) -> Vec<Edge> {
    (0..num_vertices)
        .map(|v| Edge::new(v, v, vocab.self_loop()))
        .collect()
}

/// `sent_j` edges between a document's topic vertex and its segments, both
/// directions.
pub fn topic_knowledge_edges(
    doc: &Document,
    topic_vertex: usize,
    first_knowledge: usize,
    vocab: &EdgeVocab,
) -> Vec<Edge> {
    let mut out = Vec::with_capacity(2 * doc.len());
    for (k, seg) in doc.segments.iter().enumerate() {
        both_ways(topic_vertex, first_knowledge + k, vocab.sent(seg.index), &mut out);
    }
    out
}

fn topic_lemmas(topic: &str, lemmas: &LemmaTable) -> BTreeSet<String> {
    text::tokenize(topic)
        .iter()
        .map(|t| lemmas.lemma(t))
        .filter(|l| !text::is_stopword(l))
        .collect()
}

/// `word_overlap` between topic vertices `0..topics.len()` whose lemma sets
/// share at least one non-stopword lemma.
pub fn word_overlap_edges(topics: &[&str], lemmas: &LemmaTable, vocab: &EdgeVocab) -> Vec<Edge> {
    let sets: Vec<BTreeSet<String>> = topics.iter().map(|t| topic_lemmas(t, lemmas)).collect();
    let mut out = Vec::new();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            if !sets[a].is_disjoint(&sets[b]) {
                both_ways(a, b, vocab.word_overlap(), &mut out);
            }
        }
    }
    out
}

/// Directed commonsense edges as stored in the table; a reverse direction
/// missing from the table is filled with `others`.
pub fn commonsense_edges(topics: &[&str], table: &RelationTable, vocab: &EdgeVocab) -> Vec<Edge> {
    let mut out = Vec::new();
    for (a, ta) in topics.iter().enumerate() {
        for (b, tb) in topics.iter().enumerate() {
            if a == b {
                continue;
            }
            if let Some(rel) = table.lookup(ta, tb) {
                out.push(Edge::new(a, b, vocab.commonsense(rel)));
                if table.lookup(tb, ta).is_none() {
                    out.push(Edge::new(b, a, vocab.others()));
                }
            }
        }
    }
    out
}

/// Clique over the distinct segments touched by each chain.
pub fn coreference_edges(
    doc: &Document,
    ann: &CorefAnnotation,
    first_knowledge: usize,
    vocab: &EdgeVocab,
) -> Result<Vec<Edge>> {
    ann.validate(doc)?;
    let mut out = Vec::new();
    for chain in &ann.chains {
        let segs: BTreeSet<usize> = chain.iter().map(|m| m.sent).collect();
        let segs: Vec<usize> = segs.into_iter().collect();
        for (i, &a) in segs.iter().enumerate() {
            for &b in &segs[i + 1..] {
                both_ways(first_knowledge + a - 1, first_knowledge + b - 1, vocab.coreference_link(), &mut out);
            }
        }
    }
    Ok(out)
}

/// Segments whose entity sets intersect.
pub fn common_entity_edges(
    entities: &[BTreeSet<String>],
    first_knowledge: usize,
    vocab: &EdgeVocab,
) -> Vec<Edge> {
    let mut out = Vec::new();
    for a in 0..entities.len() {
        for b in a + 1..entities.len() {
            if !entities[a].is_disjoint(&entities[b]) {
                both_ways(first_knowledge + a, first_knowledge + b, vocab.common_entity(), &mut out);
            }
        }
    }
    out
}

/// Each segment linked to the next `hop` segments, both directions.
pub fn partial_order_edges(len: usize, hop: usize, first_knowledge: usize, vocab: &EdgeVocab) -> Vec<Edge> {
    let mut out = Vec::new();
    for a in 0..len {
        for b in a + 1..=(a + hop).min(len.saturating_sub(1)) {
            both_ways(first_knowledge + a, first_knowledge + b, vocab.partial_order(), &mut out);
        }
    }
    out
}

pub fn build_graph(
    sample: &DialogSample,
    resources: &GraphResources,
    variant: &GraphVariantConfig,
    vocab: &Arc<EdgeVocab>,
) -> Result<CorefMDG> {
    if let KnowledgeEdges::PartialOrder { hop: 0 } = variant.knowledge_edges {
        return Err(Error::Config("partial order hop must be at least 1".into()));
    }
    let m = sample.documents.len();
    let topic_vertices: Vec<TopicVertex> = sample
        .documents
        .iter()
        .map(|d| TopicVertex {
            doc_id: d.doc_id.clone(),
            topic: d.topic.clone(),
        })
        .collect();
    let mut knowledge_vertices = Vec::with_capacity(sample.num_segments());
    let mut first = Vec::with_capacity(m);
    for (t, doc) in sample.documents.iter().enumerate() {
        first.push(m + knowledge_vertices.len());
        for seg in &doc.segments {
            knowledge_vertices.push(KnowledgeVertex {
                doc_id: doc.doc_id.clone(),
                index: seg.index,
                parent: t,
                sent_type: vocab.sent(seg.index),
            });
        }
    }
    let n_vertices = m + knowledge_vertices.len();

    let mut edges = self_loops(n_vertices, vocab);
    let topics: Vec<&str> = sample.documents.iter().map(|d| d.topic.as_str()).collect();
    if variant.uses_word_overlap() {
        edges.extend(word_overlap_edges(&topics, &resources.lemmas, vocab));
    }
    if variant.uses_commonsense() {
        edges.extend(commonsense_edges(&topics, &resources.relations, vocab));
    }
    for (t, doc) in sample.documents.iter().enumerate() {
        if variant.topic_knowledge_edges {
            edges.extend(topic_knowledge_edges(doc, t, first[t], vocab));
        }
        match variant.knowledge_edges {
            KnowledgeEdges::CoreferenceLink => {
                let fallback;
                let ann = match resources.coref.get(&doc.doc_id) {
                    Some(a) => Some(a),
                    None if resources.coref_fallback => {
                        fallback = fallback_coref(doc);
                        Some(&fallback)
                    }
                    None => None,
                };
                if let Some(ann) = ann {
                    edges.extend(coreference_edges(doc, ann, first[t], vocab)?);
                }
            }
            KnowledgeEdges::CommonEntity => {
                let ents = match resources.entities.get(&doc.doc_id) {
                    Some(e) if e.len() == doc.len() => e.clone(),
                    Some(e) => {
                        return Err(Error::Dimension {
                            context: "entity sets per segment",
                            expected: doc.len(),
                            actual: e.len(),
                        })
                    }
                    None => fallback_entities(doc),
                };
                edges.extend(common_entity_edges(&ents, first[t], vocab));
            }
            KnowledgeEdges::PartialOrder { hop } => {
                edges.extend(partial_order_edges(doc.len(), hop, first[t], vocab));
            }
            KnowledgeEdges::None => {}
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(CorefMDG {
        sample_id: sample.sample_id.clone(),
        topic_vertices,
        knowledge_vertices,
        edges,
        vocab: Arc::clone(vocab),
    })
}

/// Families reported by [`graph_stats`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatFamily {
    SentOrder,
    WordOverlap,
    Commonsense,
    Coreference,
    CommonEntity,
    PartialOrder,
}

impl StatFamily {
    pub const ALL: [StatFamily; 6] = [
        StatFamily::SentOrder,
        StatFamily::WordOverlap,
        StatFamily::Commonsense,
        StatFamily::Coreference,
        StatFamily::CommonEntity,
        StatFamily::PartialOrder,
    ];

    pub fn of(name: &str) -> Option<Self> {
        Some(match name {
            SELF_LOOP => return None,
            WORD_OVERLAP => StatFamily::WordOverlap,
            COREFERENCE_LINK => StatFamily::Coreference,
            COMMON_ENTITY => StatFamily::CommonEntity,
            PARTIAL_ORDER => StatFamily::PartialOrder,
            n if n == OTHERS || n.starts_with("commonsense:") => StatFamily::Commonsense,
            n if n.starts_with("sent_") => StatFamily::SentOrder,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatFamily::SentOrder => "sent_order",
            StatFamily::WordOverlap => "word_overlap",
            StatFamily::Commonsense => "commonsense",
            StatFamily::Coreference => "coreference_link",
            StatFamily::CommonEntity => "common_entity",
            StatFamily::PartialOrder => "partial_order",
        }
    }
}

/// Undirected edge count per family in one graph.
pub fn family_counts(graph: &CorefMDG) -> BTreeMap<StatFamily, usize> {
    let mut pairs: BTreeMap<StatFamily, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for e in &graph.edges {
        if let Some(f) = StatFamily::of(graph.vocab.name(e.ty)) {
            pairs.entry(f).or_default().insert((e.src.min(e.dst), e.src.max(e.dst)));
        }
    }
    StatFamily::ALL
        .iter()
        .map(|f| (*f, pairs.get(f).map_or(0, BTreeSet::len)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub samples: usize,
    pub mean_topics: f64,
    pub mean_knowledge: f64,
    pub mean_edges: BTreeMap<StatFamily, f64>,
}

pub fn graph_stats(graphs: &[CorefMDG]) -> Result<GraphStats> {
    if graphs.is_empty() {
        return Err(Error::Config("graph statistics need at least one graph".into()));
    }
    let n = graphs.len() as f64;
    let mut totals: BTreeMap<StatFamily, usize> = BTreeMap::new();
    for g in graphs {
        for (f, c) in family_counts(g) {
            *totals.entry(f).or_default() += c;
        }
    }
    Ok(GraphStats {
        samples: graphs.len(),
        mean_topics: graphs.iter().map(|g| g.num_topics()).sum::<usize>() as f64 / n,
        mean_knowledge: graphs.iter().map(|g| g.num_knowledge()).sum::<usize>() as f64 / n,
        mean_edges: totals.into_iter().map(|(f, c)| (f, c as f64 / n)).collect(),
    })
}

impl GraphStats {
    pub fn family(&self, f: StatFamily) -> f64 {
        self.mean_edges.get(&f).copied().unwrap_or(0.0)
    }
}

pub fn variant_name(variant: &GraphVariantConfig) -> String {
    GraphVariantConfig::NAMES
        .iter()
        .find(|n| GraphVariantConfig::named(n).as_ref() == Some(variant))
        .map_or_else(|| "custom".to_string(), |n| n.to_string())
}

#[cfg(test)]
mod tests;
