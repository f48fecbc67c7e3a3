//! Res-RGAT propagation, differential linearization and selection heads.
//!
//! The forward pass is recorded on an [`autograd::Tape`] so the same code
//! serves inference, training and gradient checking. Every trainable tensor
//! lives in a [`ParamStore`] under a stable name; its position in the store
//! is the id the tape uses to hand back gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{DialogSample, Role};
use crate::error::{Error, Result};
use crate::graph::{CorefMDG, Edge};
use crate::tensor::Matrix;

mod layers;

pub use layers::{diff_compare, gru_cell, res_rgat_layer, RgatLayerVars};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Structural ablations of the full model. At most one is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// `Hᴰ = [0 ; Hᴳ]`: no history sequence at all.
    NoDiffSeq,
    /// The recurrent stack reads plain history vectors `[h_hist ; 0]`.
    NoDiff,
    /// `Hᴳ = H⁰ · A` through a linear adapter instead of Res-RGAT.
    NoResRgat,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoDiffSeq, Ablation::NoDiff, Ablation::NoResRgat];

    pub fn from_flags(no_diff_seq: bool, no_diff: bool, no_res_rgat: bool) -> Result<Self> {
        match (no_diff_seq, no_diff, no_res_rgat) {
            (false, false, false) => Ok(Ablation::None),
            (true, false, false) => Ok(Ablation::NoDiffSeq),
            (false, true, false) => Ok(Ablation::NoDiff),
            (false, false, true) => Ok(Ablation::NoResRgat),
            _ => Err(Error::Config("at most one structural ablation may be active".into())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDiffSeq => "no_diff_seq",
            Ablation::NoDiff => "no_diff",
            Ablation::NoResRgat => "no_res_rgat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_init: usize,
    pub d_g: usize,
    pub d_e: usize,
    pub heads: usize,
    /// Stacked Res-RGAT layers.
    pub layers: usize,
    pub gru_layers: usize,
    /// History length `l`; also the sequence length `τ`.
    pub history: usize,
    pub leaky_slope: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl ModelConfig {
    pub fn profile(profile: Profile) -> Self {
        let (d_init, d_g, d_e, heads) = match profile {
            Profile::Desk => (32, 32, 16, 4),
            Profile::Paper => (320, 1024, 64, 8),
        };
        Self {
            d_init,
            d_g,
            d_e,
            heads,
            layers: 2,
            gru_layers: 2,
            history: 4,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            ablation: Ablation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_init", self.d_init),
            ("d_g", self.d_g),
            ("d_e", self.d_e),
            ("heads", self.heads),
            ("layers", self.layers),
            ("gru_layers", self.gru_layers),
            ("history", self.history),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of Res-RGAT layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        (if l == 0 { self.d_init } else { self.d_g }, self.d_g)
    }
}

/// Named trainable tensors. Insertion order fixes the ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(String, Matrix)>", into = "Vec<(String, Matrix)>")]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<(String, Matrix)>> for ParamStore {
    fn from(v: Vec<(String, Matrix)>) -> Self {
        v.into_iter().collect()
    }
}

impl From<ParamStore> for Vec<(String, Matrix)> {
    fn from(p: ParamStore) -> Self {
        p.names.into_iter().zip(p.values).collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id] = value;
            return id;
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    fn expect(&self, name: &str) -> usize {
        self.id(name).unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }
}

impl FromIterator<(String, Matrix)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        let mut s = ParamStore::new();
        for (n, m) in iter {
            s.insert(n, m);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VertexKind {
    Topic,
    Knowledge { parent: usize, sent_type: usize },
}

/// The part of a graph the model reads. Vertex order is free, which is what
/// the relabeling tests rely on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub kinds: Vec<VertexKind>,
    pub edges: Vec<Edge>,
    pub num_edge_types: usize,
}

impl Topology {
    pub fn from_graph(g: &CorefMDG) -> Self {
        let mut kinds = vec![VertexKind::Topic; g.num_topics()];
        kinds.extend(g.knowledge_vertices.iter().map(|k| VertexKind::Knowledge {
            parent: k.parent,
            sent_type: k.sent_type,
        }));
        Self {
            kinds,
            edges: g.edges.clone(),
            num_edge_types: g.vocab.len(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.kinds.len()
    }

    pub fn topic_vertices(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&v| self.kinds[v] == VertexKind::Topic)
            .collect()
    }

    pub fn knowledge_vertices(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&v| self.kinds[v] != VertexKind::Topic)
            .collect()
    }

    /// Relabels vertex `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut kinds = vec![VertexKind::Topic; self.kinds.len()];
        for (v, k) in self.kinds.iter().enumerate() {
            kinds[perm[v]] = match *k {
                VertexKind::Topic => VertexKind::Topic,
                VertexKind::Knowledge { parent, sent_type } => VertexKind::Knowledge {
                    parent: perm[parent],
                    sent_type,
                },
            };
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge::new(perm[e.src], perm[e.dst], e.ty))
            .collect();
        edges.sort_unstable();
        Self {
            kinds,
            edges,
            num_edge_types: self.num_edge_types,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        let mut has_loop = vec![false; n];
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Label(format!("edge {e:?} outside {n} vertices")));
            }
            if e.ty >= self.num_edge_types {
                return Err(Error::Label(format!("edge type {} outside vocabulary", e.ty)));
            }
            has_loop[e.dst] = true;
        }
        if let Some(v) = has_loop.iter().position(|h| !h) {
            return Err(Error::Label(format!("vertex {v} has no incoming edge")));
        }
        for k in &self.kinds {
            if let VertexKind::Knowledge { parent, sent_type } = *k {
                if parent >= n || self.kinds[parent] != VertexKind::Topic || sent_type >= self.num_edge_types {
                    return Err(Error::Label("knowledge vertex with invalid parent or type".into()));
                }
            }
        }
        Ok(())
    }
}

/// Vertex ids of earlier gold selections.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    /// `τ` entries, oldest first; `None` is the padded null position.
    pub topic_seq: Vec<Option<usize>>,
    pub knowledge_seq: Vec<Option<usize>>,
    /// `l` slots; slot 0 is the most recent agent turn. `None` means the slot
    /// has no label and is skipped by the loss.
    pub slots: Vec<Option<(usize, usize)>>,
}

impl History {
    pub fn empty(tau: usize, l: usize) -> Self {
        Self {
            topic_seq: vec![None; tau],
            knowledge_seq: vec![None; tau],
            slots: vec![None; l],
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = |v: &Option<usize>| v.map(|x| perm[x]);
        Self {
            topic_seq: self.topic_seq.iter().map(p).collect(),
            knowledge_seq: self.knowledge_seq.iter().map(p).collect(),
            slots: self.slots.iter().map(|s| s.map(|(t, k)| (perm[t], perm[k]))).collect(),
        }
    }
}

/// Gold topic/knowledge vertices of the `τ` most recent labeled agent turns
/// (left-padded), plus the per-slot history labels for the last `l` agent
/// turns.
pub fn history_sequence(sample: &DialogSample, graph: &CorefMDG, tau: usize, l: usize) -> History {
    let vertex = |label| {
        let k = graph.knowledge_vertex(label)?;
        Some((graph.knowledge_vertices[k - graph.num_topics()].parent, k))
    };
    let mut recent: Vec<(usize, usize)> = sample
        .agent_labels_newest_first()
        .filter_map(vertex)
        .take(tau)
        .collect();
    recent.reverse();
    let pad = tau - recent.len();
    let mut h = History::empty(tau, l);
    for (i, (t, k)) in recent.into_iter().enumerate() {
        h.topic_seq[pad + i] = Some(t);
        h.knowledge_seq[pad + i] = Some(k);
    }
    let slots = sample
        .turns
        .iter()
        .rev()
        .filter(|t| t.role == Role::Agent)
        .take(l)
        .map(|t| t.gold.as_ref().and_then(vertex));
    for (i, s) in slots.enumerate() {
        h.slots[i] = s;
    }
    h
}

/// Everything the loss needs besides the logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub topic: usize,
    pub knowledge: usize,
    pub history: History,
}

impl Targets {
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            topic: perm[self.topic],
            knowledge: perm[self.knowledge],
            history: self.history.permuted(perm),
        }
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub params: Vec<Var>,
    pub hg: Var,
    pub hd: Var,
    /// `M × 1`, in topology topic order.
    pub topic_logits: Var,
    /// `N × 1`, in topology knowledge order.
    pub knowledge_logits: Var,
    /// Per history slot `(topic, knowledge)` logits.
    pub history_logits: Vec<(Var, Var)>,
    /// Per layer, per head: attention weight of every edge (`|E| × 1`).
    pub attention: Vec<Vec<Var>>,
    pub topic_vertices: Vec<usize>,
    pub knowledge_vertices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub topic_logits: Vec<f64>,
    pub knowledge_logits: Vec<f64>,
    pub history_logits: Vec<(Vec<f64>, Vec<f64>)>,
    pub hg: Matrix,
    pub hd: Matrix,
    pub topic_vertices: Vec<usize>,
    pub knowledge_vertices: Vec<usize>,
}

impl ModelOutput {
    /// Predicted `(topic vertex, knowledge vertex)`; ties go to the lowest
    /// position.
    pub fn argmax(&self) -> (usize, usize) {
        let t = crate::eval::argmax(&self.topic_logits).unwrap_or(0);
        let k = crate::eval::argmax(&self.knowledge_logits).unwrap_or(0);
        (self.topic_vertices[t], self.knowledge_vertices[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub knowledge: f64,
    pub topic: f64,
    /// Already scaled by `1/(2l)`.
    pub history: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub num_edge_types: usize,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, libm::sqrt(6.0 / (rows + cols) as f64))
}

impl Model {
    pub fn new(config: ModelConfig, num_edge_types: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_edge_types == 0 {
            return Err(Error::Config("edge vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        p.insert("edge_embedding", uniform(&mut rng, num_edge_types, c.d_e, 0.5));
        if c.ablation == Ablation::NoResRgat {
            p.insert("adapter", xavier(&mut rng, c.d_init, c.d_g));
        } else {
            for l in 0..c.layers {
                let (d_in, d_out) = c.layer_dims(l);
                for h in 0..c.heads {
                    p.insert(format!("rgat.{l}.head.{h}.p"), xavier(&mut rng, d_in, d_in));
                    p.insert(format!("rgat.{l}.head.{h}.q"), xavier(&mut rng, c.d_e, d_in));
                    for a in ["a_dst", "a_src", "a_edge"] {
                        p.insert(format!("rgat.{l}.head.{h}.{a}"), xavier(&mut rng, d_in, 1));
                    }
                }
                let mut w = xavier(&mut rng, 2 * d_in, d_out);
                if d_in == d_out {
                    w.scale(0.5);
                    for i in 0..d_in {
                        w.set(i, i, w.get(i, i) + 1.0);
                    }
                }
                p.insert(format!("rgat.{l}.w"), w);
            }
        }
        p.insert("null_history", uniform(&mut rng, 1, c.d_g, 0.1));
        for k in 0..c.gru_layers {
            let d_in = if k == 0 { 2 * c.d_g } else { c.d_g };
            p.insert(format!("gru.{k}.w_i"), xavier(&mut rng, d_in, 3 * c.d_g));
            p.insert(format!("gru.{k}.w_h"), xavier(&mut rng, c.d_g, 3 * c.d_g));
            p.insert(format!("gru.{k}.b_i"), Matrix::zeros(1, 3 * c.d_g));
            p.insert(format!("gru.{k}.b_h"), Matrix::zeros(1, 3 * c.d_g));
        }
        let head_in_k = 4 * c.d_g + c.d_e;
        p.insert("head.topic.w", xavier(&mut rng, 2 * c.d_g, 1));
        p.insert("head.topic.b", Matrix::zeros(1, 1));
        p.insert("head.knowledge.w", xavier(&mut rng, head_in_k, 1));
        p.insert("head.knowledge.b", Matrix::zeros(1, 1));
        for hi in 1..=c.history {
            p.insert(format!("head.hist.{hi}.topic.w"), xavier(&mut rng, 2 * c.d_g, 1));
            p.insert(format!("head.hist.{hi}.topic.b"), Matrix::zeros(1, 1));
            p.insert(format!("head.hist.{hi}.knowledge.w"), xavier(&mut rng, head_in_k, 1));
            p.insert(format!("head.hist.{hi}.knowledge.b"), Matrix::zeros(1, 1));
        }
        Ok(Self {
            config,
            num_edge_types,
            params: p,
        })
    }

    fn check_inputs(&self, topo: &Topology, h0: &Matrix, history: &History) -> Result<()> {
        topo.validate()?;
        if topo.num_edge_types != self.num_edge_types {
            return Err(Error::Dimension {
                context: "edge vocabulary",
                expected: self.num_edge_types,
                actual: topo.num_edge_types,
            });
        }
        if h0.shape() != (topo.num_vertices(), self.config.d_init) {
            return Err(Error::Dimension {
                context: "initial vertex embeddings",
                expected: topo.num_vertices() * self.config.d_init,
                actual: h0.rows() * h0.cols(),
            });
        }
        if !h0.is_finite() {
            return Err(Error::NonFinite("initial vertex embeddings".into()));
        }
        let tau = self.config.history;
        if history.topic_seq.len() != tau || history.knowledge_seq.len() != tau {
            return Err(Error::Dimension {
                context: "history sequence length",
                expected: tau,
                actual: history.knowledge_seq.len(),
            });
        }
        let n = topo.num_vertices();
        let seq = history.topic_seq.iter().chain(&history.knowledge_seq).flatten();
        let slots = history.slots.iter().flatten().flat_map(|(a, b)| [a, b]);
        if seq.chain(slots).any(|&v| v >= n) {
            return Err(Error::Label("history vertex out of range".into()));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape, vars: &mut [Option<Var>], name: &str) -> Var {
        let id = self.params.expect(name);
        *vars[id].get_or_insert_with(|| tape.param(id, self.params.values()[id].clone()))
    }

    /// Stacked Res-RGAT (or the adapter under `NoResRgat`).
    fn propagate_vars(
        &self,
        tape: &mut Tape,
        vars: &mut [Option<Var>],
        topo: &Topology,
        h0: Var,
        attention: &mut Vec<Vec<Var>>,
    ) -> Var {
        let c = &self.config;
        if c.ablation == Ablation::NoResRgat {
            let a = self.p(tape, vars, "adapter");
            return tape.matmul(h0, a);
        }
        let r = self.p(tape, vars, "edge_embedding");
        let mut h = h0;
        for l in 0..c.layers {
            let heads: Vec<RgatLayerVars> = (0..c.heads)
                .map(|hd| RgatLayerVars {
                    p: self.p(tape, vars, &format!("rgat.{l}.head.{hd}.p")),
                    q: self.p(tape, vars, &format!("rgat.{l}.head.{hd}.q")),
                    a_dst: self.p(tape, vars, &format!("rgat.{l}.head.{hd}.a_dst")),
                    a_src: self.p(tape, vars, &format!("rgat.{l}.head.{hd}.a_src")),
                    a_edge: self.p(tape, vars, &format!("rgat.{l}.head.{hd}.a_edge")),
                })
                .collect();
            let w = self.p(tape, vars, &format!("rgat.{l}.w"));
            let (out, alphas) = res_rgat_layer(tape, h, r, &heads, w, &topo.edges, c.leaky_slope);
            attention.push(alphas);
            h = out;
        }
        h
    }

    /// Records the full forward pass on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape, topo: &Topology, h0: &Matrix, history: &History) -> Result<ForwardVars> {
        self.check_inputs(topo, h0, history)?;
        if topo.topic_vertices().is_empty() || topo.knowledge_vertices().is_empty() {
            return Err(Error::Label("graph needs at least one topic and one knowledge vertex".into()));
        }
        let c = &self.config;
        let n = topo.num_vertices();
        let mut vars: Vec<Option<Var>> = vec![None; self.params.len()];
        let h0v = tape.constant(h0.clone());
        let mut attention = Vec::new();
        let hg = self.propagate_vars(tape, &mut vars, topo, h0v, &mut attention);

        let hd = if c.ablation == Ablation::NoDiffSeq {
            let zeros = tape.constant(Matrix::zeros(n, c.d_g));
            tape.concat_cols(zeros, hg)
        } else {
            let null = self.p(tape, &mut vars, "null_history");
            let src = tape.concat_rows(hg, null);
            let gru: Vec<[Var; 4]> = (0..c.gru_layers)
                .map(|k| {
                    ["w_i", "w_h", "b_i", "b_h"].map(|s| self.p(tape, &mut vars, &format!("gru.{k}.{s}")))
                })
                .collect();
            let mut hidden: Vec<Var> = (0..c.gru_layers)
                .map(|_| tape.constant(Matrix::zeros(n, c.d_g)))
                .collect();
            for t in 0..c.history {
                let idx: Vec<usize> = topo
                    .kinds
                    .iter()
                    .map(|k| {
                        let v = match k {
                            VertexKind::Topic => history.topic_seq[t],
                            VertexKind::Knowledge { .. } => history.knowledge_seq[t],
                        };
                        v.unwrap_or(n)
                    })
                    .collect();
                let hist = tape.gather_rows(src, idx);
                let mut x = if c.ablation == Ablation::NoDiff {
                    let zeros = tape.constant(Matrix::zeros(n, c.d_g));
                    tape.concat_cols(hist, zeros)
                } else {
                    diff_compare(tape, hist, hg)
                };
                for (k, g) in gru.iter().enumerate() {
                    hidden[k] = gru_cell(tape, x, hidden[k], g[0], g[1], g[2], g[3]);
                    x = hidden[k];
                }
            }
            tape.concat_cols(hidden[c.gru_layers - 1], hg)
        };

        let topic_vertices = topo.topic_vertices();
        let knowledge_vertices = topo.knowledge_vertices();
        let (parents, sent_types): (Vec<usize>, Vec<usize>) = knowledge_vertices
            .iter()
            .map(|&v| match topo.kinds[v] {
                VertexKind::Knowledge { parent, sent_type } => (parent, sent_type),
                VertexKind::Topic => unreachable!(),
            })
            .unzip();
        let r = self.p(tape, &mut vars, "edge_embedding");
        let topic_in = tape.gather_rows(hd, topic_vertices.clone());
        let k_self = tape.gather_rows(hd, knowledge_vertices.clone());
        let k_parent = tape.gather_rows(hd, parents);
        let k_edge = tape.gather_rows(r, sent_types);
        let k_pair = tape.concat_cols(k_self, k_parent);
        let knowledge_in = tape.concat_cols(k_pair, k_edge);

        let mut head = |tape: &mut Tape, input: Var, prefix: &str| {
            let w = self.p(tape, &mut vars, &format!("{prefix}.w"));
            let b = self.p(tape, &mut vars, &format!("{prefix}.b"));
            let z = tape.matmul(input, w);
            tape.add_row(z, b)
        };
        let topic_logits = head(tape, topic_in, "head.topic");
        let knowledge_logits = head(tape, knowledge_in, "head.knowledge");
        let history_logits = (1..=c.history)
            .map(|hi| {
                (
                    head(tape, topic_in, &format!("head.hist.{hi}.topic")),
                    head(tape, knowledge_in, &format!("head.hist.{hi}.knowledge")),
                )
            })
            .collect();

        let params = vars
            .into_iter()
            .enumerate()
            .map(|(id, v)| v.unwrap_or_else(|| tape.param(id, self.params.values()[id].clone())))
            .collect();
        Ok(ForwardVars {
            params,
            hg,
            hd,
            topic_logits,
            knowledge_logits,
            history_logits,
            attention,
            topic_vertices,
            knowledge_vertices,
        })
    }

    pub fn forward(&self, topo: &Topology, h0: &Matrix, history: &History) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let f = self.forward_vars(&mut tape, topo, h0, history)?;
        let col = |v: Var| tape.value(v).data().to_vec();
        let out = ModelOutput {
            topic_logits: col(f.topic_logits),
            knowledge_logits: col(f.knowledge_logits),
            history_logits: f.history_logits.iter().map(|(t, k)| (col(*t), col(*k))).collect(),
            hg: tape.value(f.hg).clone(),
            hd: tape.value(f.hd).clone(),
            topic_vertices: f.topic_vertices,
            knowledge_vertices: f.knowledge_vertices,
        };
        if !out.topic_logits.iter().chain(&out.knowledge_logits).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("selection logits".into()));
        }
        Ok(out)
    }

    /// `Hᴳ` alone.
    pub fn propagate(&self, topo: &Topology, h0: &Matrix) -> Result<Matrix> {
        self.check_inputs(topo, h0, &History::empty(self.config.history, 0))?;
        let mut tape = Tape::new();
        let mut vars = vec![None; self.params.len()];
        let h = tape.constant(h0.clone());
        let mut att = Vec::new();
        let hg = self.propagate_vars(&mut tape, &mut vars, topo, h, &mut att);
        Ok(tape.value(hg).clone())
    }

    /// Attention weights per layer, per head, per edge (edge order of
    /// `topo.edges`).
    pub fn attention_weights(&self, topo: &Topology, h0: &Matrix) -> Result<Vec<Vec<Vec<f64>>>> {
        self.check_inputs(topo, h0, &History::empty(self.config.history, 0))?;
        let mut tape = Tape::new();
        let mut vars = vec![None; self.params.len()];
        let h = tape.constant(h0.clone());
        let mut att = Vec::new();
        self.propagate_vars(&mut tape, &mut vars, topo, h, &mut att);
        Ok(att
            .iter()
            .map(|heads| heads.iter().map(|a| tape.value(*a).data().to_vec()).collect())
            .collect())
    }

    fn loss_vars(&self, tape: &mut Tape, f: &ForwardVars, targets: &Targets) -> Result<(Var, [Var; 3])> {
        let pos = |list: &[usize], v: usize, what: &str| {
            list.iter()
                .position(|&x| x == v)
                .ok_or_else(|| Error::Label(format!("{what} target vertex {v} is not a {what} vertex")))
        };
        let kt = pos(&f.knowledge_vertices, targets.knowledge, "knowledge")?;
        let tt = pos(&f.topic_vertices, targets.topic, "topic")?;
        let ce_k = tape.cross_entropy(f.knowledge_logits, kt);
        let ce_t = tape.cross_entropy(f.topic_logits, tt);
        let l = self.config.history;
        let mut hist_terms = Vec::new();
        for (slot, label) in targets.history.slots.iter().enumerate().take(l) {
            if let Some((t, k)) = *label {
                let (lt, lk) = f.history_logits[slot];
                let tt = pos(&f.topic_vertices, t, "topic")?;
                let kt = pos(&f.knowledge_vertices, k, "knowledge")?;
                hist_terms.push((tape.cross_entropy(lk, kt), 1.0));
                hist_terms.push((tape.cross_entropy(lt, tt), 1.0));
            }
        }
        let hist = if hist_terms.is_empty() {
            tape.constant(Matrix::scalar(0.0))
        } else {
            let s = tape.weighted_sum(hist_terms);
            tape.scale(s, 1.0 / (2 * l) as f64)
        };
        let total = tape.weighted_sum(vec![(ce_k, 1.0), (ce_t, 1.0), (hist, 1.0)]);
        Ok((total, [ce_k, ce_t, hist]))
    }

    fn breakdown(tape: &Tape, total: Var, parts: [Var; 3]) -> LossBreakdown {
        let s = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            total: s(total),
            knowledge: s(parts[0]),
            topic: s(parts[1]),
            history: s(parts[2]),
        }
    }

    pub fn loss(&self, topo: &Topology, h0: &Matrix, targets: &Targets) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let f = self.forward_vars(&mut tape, topo, h0, &targets.history)?;
        let (total, parts) = self.loss_vars(&mut tape, &f, targets)?;
        Ok(Self::breakdown(&tape, total, parts))
    }

    /// Loss and its exact gradient with respect to every parameter (store
    /// order). Parameters the loss does not touch get zero gradients.
    pub fn loss_and_gradients(&self, topo: &Topology, h0: &Matrix, targets: &Targets) -> Result<(LossBreakdown, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let f = self.forward_vars(&mut tape, topo, h0, &targets.history)?;
        let (total, parts) = self.loss_vars(&mut tape, &f, targets)?;
        let loss = Self::breakdown(&tape, total, parts);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = tape.backward(total);
        let mut out = Vec::with_capacity(self.params.len());
        for (id, v) in f.params.iter().enumerate() {
            let value = &self.params.values()[id];
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", self.params.name(id))));
            }
            out.push(g);
        }
        Ok((loss, out))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().iter().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests;
