use super::*;
use crate::corpus::{Mention, Turn};
use alloc::vec;

fn vocab() -> Arc<EdgeVocab> {
    let kept: Vec<String> = vec!["capital_of".into()];
    Arc::new(EdgeVocab::new(&kept, DEFAULT_J_MAX))
}

fn sample(docs: Vec<Document>) -> DialogSample {
    let gold = Label::new(docs[0].doc_id.clone(), 1);
    DialogSample {
        sample_id: "s".into(),
        turns: vec![Turn::user("hello")],
        documents: docs,
        gold,
    }
}

fn no_families() -> GraphVariantConfig {
    GraphVariantConfig {
        topic_knowledge_edges: true,
        topic_edges: false,
        word_overlap: false,
        commonsense: false,
        knowledge_edges: KnowledgeEdges::None,
    }
}

#[test]
fn mandatory_structure_only() {
    let s = sample(vec![
        Document::new("a", "blue", ["x", "y"]),
        Document::new("b", "red", ["z", "w"]),
    ]);
    let g = build_graph(&s, &GraphResources::default(), &no_families(), &vocab()).unwrap();
    assert_eq!(g.num_vertices(), 6);
    let v = &g.vocab;
    let loops = g.edges.iter().filter(|e| e.ty == v.self_loop()).count();
    let sent = g.edges.iter().filter(|e| StatFamily::of(v.name(e.ty)) == Some(StatFamily::SentOrder)).count();
    assert_eq!((loops, sent, g.edges.len()), (6, 8, 14));
}

#[test]
fn sent_types_cap_at_sent_max() {
    let v = EdgeVocab::new(&[], 3);
    let doc = Document::new("d", "t", ["a", "b", "c", "d", "e"]);
    let names: Vec<&str> = topic_knowledge_edges(&doc, 0, 1, &v)
        .iter()
        .filter(|e| e.src == 0)
        .map(|e| v.name(e.ty))
        .collect();
    assert_eq!(names, ["sent_1", "sent_2", "sent_3", "sent_max", "sent_max"]);
}

#[test]
fn word_overlap_uses_lemmas() {
    let v = vocab();
    let lemmas = LemmaTable::new([("films".to_string(), "film".to_string())]);
    assert!(word_overlap_edges(&["blue", "red"], &lemmas, &v).is_empty());
    assert_eq!(word_overlap_edges(&["science fiction film", "science fiction novel"], &lemmas, &v).len(), 2);
    assert_eq!(word_overlap_edges(&["hair loss", "management of hair loss"], &lemmas, &v).len(), 2);
    assert_eq!(word_overlap_edges(&["films", "film"], &lemmas, &v).len(), 2);
    // Shared stopword only.
    assert!(word_overlap_edges(&["the moon", "the sun"], &lemmas, &v).is_empty());
}

#[test]
fn commonsense_direction_and_reverse_others() {
    let v = vocab();
    let raw = vec![
        ("UK".to_string(), "London".to_string(), "capital_of".to_string()),
        ("a".to_string(), "b".to_string(), "rare".to_string()),
    ];
    let table = RelationTable::build(&raw, 1);
    let e = commonsense_edges(&["UK", "London"], &table, &v);
    assert!(e.contains(&Edge::new(0, 1, v.commonsense("capital_of"))));
    assert!(e.contains(&Edge::new(1, 0, v.others())));
    assert_eq!(e.len(), 2);
    let rare = commonsense_edges(&["a", "b"], &table, &v);
    assert!(rare.contains(&Edge::new(0, 1, v.others())));
    assert!(commonsense_edges(&["x", "y"], &table, &v).is_empty());
}

fn chain(sents: &[usize]) -> Vec<Mention> {
    sents.iter().map(|&s| Mention { sent: s, start: 0, end: 1 }).collect()
}

#[test]
fn coreference_clique() {
    let v = vocab();
    let doc = Document::new("d", "t", ["a1", "b2", "c3", "d4", "e5", "f6"]);
    let ann = |chains| CorefAnnotation { doc_id: "d".into(), chains };
    let e = coreference_edges(&doc, &ann(vec![chain(&[2, 6])]), 0, &v).unwrap();
    assert_eq!(e, vec![Edge::new(1, 5, v.coreference_link()), Edge::new(5, 1, v.coreference_link())]);
    assert!(coreference_edges(&doc, &ann(vec![chain(&[4, 4])]), 0, &v).unwrap().is_empty());
    let e = coreference_edges(&doc, &ann(vec![chain(&[1, 3, 5, 3])]), 0, &v).unwrap();
    let pairs: BTreeSet<(usize, usize)> = e.iter().map(|e| (e.src, e.dst)).collect();
    let expect: BTreeSet<(usize, usize)> = [(0, 2), (2, 0), (0, 4), (4, 0), (2, 4), (4, 2)].into_iter().collect();
    assert_eq!(pairs, expect);
    let bad = ann(vec![vec![Mention { sent: 1, start: 0, end: 9 }, Mention { sent: 2, start: 0, end: 1 }]]);
    assert!(coreference_edges(&doc, &bad, 0, &v).is_err());
}

#[test]
fn partial_order_hops() {
    let v = vocab();
    let fwd = |k| {
        partial_order_edges(4, k, 0, &v)
            .into_iter()
            .filter(|e| e.src < e.dst)
            .map(|e| (e.src + 1, e.dst + 1))
            .collect::<Vec<_>>()
    };
    assert_eq!(fwd(2), vec![(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]);
    assert_eq!(fwd(1), vec![(1, 2), (2, 3), (3, 4)]);
}

#[test]
fn common_entities_intersect() {
    let v = vocab();
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    let e = common_entity_edges(&[set(&["Seattle"]), set(&["Boeing"]), set(&["Seattle", "Washington"])], 0, &v);
    assert_eq!(e.len(), 2);
    assert!(common_entity_edges(&[set(&["a"]), set(&["b"])], 0, &v).is_empty());
}

#[test]
fn stats_count_undirected_edges() {
    let s = sample(vec![
        Document::new("a", "hair loss", ["x", "y"]),
        Document::new("b", "management of hair loss", ["z"]),
    ]);
    let g = build_graph(&s, &GraphResources::default(), &GraphVariantConfig::full(), &vocab()).unwrap();
    let st = graph_stats(&[g]).unwrap();
    assert_eq!(st.family(StatFamily::WordOverlap), 1.0);
    assert_eq!(st.family(StatFamily::SentOrder), 3.0);
    assert!(graph_stats(&[]).is_err());
}

#[test]
fn unknown_annotation_document_is_rejected() {
    let doc = Document::new("d", "t", ["a b"]);
    let ann = CorefAnnotation {
        doc_id: "zzz".into(),
        chains: vec![],
    };
    assert!(CorefIndex::new([ann], [&doc]).is_err());
}

#[test]
fn variants_are_named() {
    for n in GraphVariantConfig::NAMES {
        let v = GraphVariantConfig::named(n).unwrap();
        assert_eq!(variant_name(&v), n);
    }
    assert!(GraphVariantConfig::named("nope").is_none());
}
