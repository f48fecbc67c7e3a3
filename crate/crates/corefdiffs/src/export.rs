//! Graph inspection formats: Graphviz DOT and a JSON mirror of the graph.

use std::fmt::Write;

use corefdiffs_core::graph::{CorefMDG, KnowledgeVertex, TopicVertex};
use serde::{Deserialize, Serialize};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// One DOT digraph; topic vertices are boxes, edge labels are type names.
pub fn to_dot(g: &CorefMDG) -> String {
    let mut s = String::new();
    writeln!(s, "digraph {} {{", quote(&g.sample_id)).unwrap();
    for (i, t) in g.topic_vertices.iter().enumerate() {
        writeln!(s, "  v{i} [shape=box, label={}];", quote(&t.topic)).unwrap();
    }
    for (j, k) in g.knowledge_vertices.iter().enumerate() {
        let label = format!("{}:{}", k.doc_id, k.index);
        writeln!(s, "  v{} [label={}];", g.num_topics() + j, quote(&label)).unwrap();
    }
    for e in &g.edges {
        writeln!(s, "  v{} -> v{} [label={}];", e.src, e.dst, quote(g.vocab.name(e.ty))).unwrap();
    }
    s.push_str("}\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub src: usize,
    pub dst: usize,
    pub ty: usize,
    pub name: String,
}

/// Serializable view of a graph; field order is fixed by declaration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub sample_id: String,
    pub topic_vertices: Vec<TopicVertex>,
    pub knowledge_vertices: Vec<KnowledgeVertex>,
    pub edges: Vec<EdgeJson>,
    pub edge_vocab: Vec<String>,
}

impl From<&CorefMDG> for GraphJson {
    fn from(g: &CorefMDG) -> Self {
        Self {
            sample_id: g.sample_id.clone(),
            topic_vertices: g.topic_vertices.clone(),
            knowledge_vertices: g.knowledge_vertices.clone(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeJson {
                    src: e.src,
                    dst: e.dst,
                    ty: e.ty,
                    name: g.vocab.name(e.ty).to_string(),
                })
                .collect(),
            edge_vocab: g.vocab.types().iter().map(|t| t.name.clone()).collect(),
        }
    }
}

/// File stem for per-sample outputs: anything outside `[A-Za-z0-9_.-]`
/// becomes `_`.
pub fn file_stem(sample_id: &str) -> String {
    sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.-".contains(c) { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use corefdiffs_core::corpus::{DialogSample, Document, Label, Turn};
    use corefdiffs_core::graph::{build_graph, EdgeVocab, GraphResources, GraphVariantConfig, DEFAULT_J_MAX};
    use std::sync::Arc;

    #[test]
    fn dot_lists_every_vertex_and_edge() {
        let s = DialogSample {
            sample_id: "a/b".into(),
            turns: vec![Turn::user("hi")],
            documents: vec![Document::new("d", "say \"hi\"", ["x", "y"])],
            gold: Label::new("d", 1),
        };
        let vocab = Arc::new(EdgeVocab::new(&[], DEFAULT_J_MAX));
        let g = build_graph(&s, &GraphResources::default(), &GraphVariantConfig::full(), &vocab).unwrap();
        let dot = to_dot(&g);
        assert_eq!(dot.matches("->").count(), g.edges.len());
        assert!(dot.contains(r#"label="say \"hi\"""#));
        assert!(dot.contains(r#"v0 -> v1 [label="sent_1"]"#));
        let j = GraphJson::from(&g);
        assert_eq!(j.edges.len(), g.edges.len());
        assert_eq!(file_stem(&g.sample_id), "a_b");
    }
}
