use std::collections::BTreeSet;

use corefdiffs::embeddings::{export_embeddings, FileProvider};
use corefdiffs::io::{
    corpus_to_json, load_coref, load_corpus, load_entities, load_lemmas, load_relations, parse_corpus,
    save_coref, save_corpus, save_lemmas, save_relations, CorpusSchema,
};
use corefdiffs_core::corpus::{
    generate_synthetic_corpus, DialogSample, Document, Label, Role, SynthSpec, Turn,
};
use corefdiffs_core::encoder::{EmbeddingProvider, HashingFeaturizer};
use corefdiffs_core::graph::{build_graph, EdgeVocab, GraphResources, GraphVariantConfig, DEFAULT_J_MAX};
use corefdiffs_core::encoder::encode_vertices;
use proptest::prelude::*;
use std::sync::Arc;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini").join(name)
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.'\"\\\\é?!-]{0,24}[a-z]"
}

prop_compose! {
    fn document(id: String)(topic in text(), sents in prop::collection::vec(text(), 1..5)) -> Document {
        Document::new(id.clone(), topic, sents)
    }
}

fn sample() -> impl Strategy<Value = DialogSample> {
    (1usize..4)
        .prop_flat_map(|n| {
            let docs: Vec<_> = (0..n).map(|i| document(format!("d{i}"))).collect();
            (docs, prop::collection::vec((text(), text(), any::<bool>()), 0..3), text(), any::<prop::sample::Index>())
        })
        .prop_map(|(docs, exchanges, last, pick)| {
            let labels: Vec<Label> = docs
                .iter()
                .flat_map(|d| d.segments.iter().map(|s| Label::new(d.doc_id.clone(), s.index)))
                .collect();
            let mut turns = Vec::new();
            for (i, (u, a, labeled)) in exchanges.into_iter().enumerate() {
                turns.push(Turn::user(u));
                let gold = labeled.then(|| labels[i % labels.len()].clone());
                turns.push(Turn::agent(a, gold));
            }
            turns.push(Turn::user(last));
            DialogSample {
                sample_id: "p".into(),
                turns,
                gold: pick.get(&labels).clone(),
                documents: docs,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_json_round_trips(s in sample()) {
        prop_assert!(s.validate().is_ok());
        let back = parse_corpus(&corpus_to_json(&[s.clone()]), &CorpusSchema::MultiDoc).unwrap();
        prop_assert_eq!(back, vec![s]);
    }
}

#[test]
fn synthetic_bundle_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let b = generate_synthetic_corpus(7, &SynthSpec { train_samples: 8, test_samples: 4, ..SynthSpec::default() });
    let p = |n: &str| dir.path().join(n);
    save_corpus(&p("c.json"), &b.coref_train).unwrap();
    assert_eq!(load_corpus(&p("c.json"), &CorpusSchema::MultiDoc).unwrap(), b.coref_train);
    save_coref(&p("coref.json"), &b.annotations).unwrap();
    assert_eq!(load_coref(&p("coref.json")).unwrap(), b.annotations);
    save_relations(&p("r.tsv"), &b.raw_relations).unwrap();
    assert_eq!(load_relations(&p("r.tsv")).unwrap(), b.raw_relations);
    save_lemmas(&p("l.tsv"), &b.lemmas).unwrap();
    assert_eq!(load_lemmas(&p("l.tsv")).unwrap(), b.lemmas);
}

#[test]
fn mini_corpus_matches_hand_counts() {
    let samples = load_corpus(&fixture("corpus.json"), &CorpusSchema::MultiDoc).unwrap();
    let want: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("expected.json")).unwrap()).unwrap();
    assert_eq!(samples.len() as u64, want["samples"].as_u64().unwrap());
    for (s, w) in samples.iter().zip(want["per_sample"].as_array().unwrap()) {
        assert_eq!(s.sample_id, w["id"].as_str().unwrap());
        assert_eq!(s.documents.len() as u64, w["topics"].as_u64().unwrap());
        assert_eq!(s.num_segments() as u64, w["knowledge"].as_u64().unwrap());
        assert_eq!(s.turns.last().unwrap().role, Role::User);
    }
    let docs: BTreeSet<&str> = samples.iter().flat_map(|s| &s.documents).map(|d| d.doc_id.as_str()).collect();
    let segs: BTreeSet<(&str, usize)> = samples
        .iter()
        .flat_map(|s| &s.documents)
        .flat_map(|d| d.segments.iter().map(move |g| (d.doc_id.as_str(), g.index)))
        .collect();
    assert_eq!(docs.len() as u64, want["documents"].as_u64().unwrap());
    assert_eq!(segs.len() as u64, want["distinct_segments"].as_u64().unwrap());
}

#[test]
fn coref_mentions_cover_the_named_spans() {
    let samples = load_corpus(&fixture("corpus.json"), &CorpusSchema::MultiDoc).unwrap();
    let seattle = samples[1].document("seattle").unwrap();
    let ann = load_coref(&fixture("coref.json")).unwrap();
    let chain = &ann.iter().find(|a| a.doc_id == "seattle").unwrap().chains[0];
    let span = |i: usize| {
        let m = chain[i];
        &seattle.segment(m.sent).unwrap().text[m.start..m.end]
    };
    assert_eq!((span(0), span(1)), ("The Space Needle", "It"));
    assert_eq!((chain[0].sent, chain[1].sent), (2, 6));
}

#[test]
fn entity_file_is_lowercased_per_segment() {
    let e = load_entities(&fixture("entities.json")).unwrap();
    assert_eq!(e["seattle"].len(), 6);
    assert!(e["seattle"][0].contains("seattle"));
    assert!(e["hair-loss"][2].is_empty());
}

#[test]
fn schema_errors_name_the_sample() {
    let bad = r#"{"samples":[{"id":"x","turns":[{"role":"agent","text":"hi"}],
        "docs":[{"id":"d","topic":"t","sents":["s"]}],"gold":{"doc":"d","sent":1}}]}"#;
    let err = parse_corpus(bad, &CorpusSchema::MultiDoc).unwrap_err().to_string();
    assert!(err.contains('x') && err.contains("final turn"), "{err}");
    let dangling = bad.replace("agent", "user").replace(r#""sent":1"#, r#""sent":4"#);
    assert!(parse_corpus(&dangling, &CorpusSchema::MultiDoc).is_err());
}

#[test]
fn exported_embeddings_reproduce_the_featurizer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.jsonl");
    let samples = load_corpus(&fixture("corpus.json"), &CorpusSchema::MultiDoc).unwrap();
    let hashing = HashingFeaturizer::new(12, 3).unwrap();
    let n = export_embeddings(&path, &hashing, &samples, 2).unwrap();
    let file = FileProvider::load(&path).unwrap();
    assert_eq!(n, file.len());
    assert_eq!(file.dim(), 12);
    let vocab = Arc::new(EdgeVocab::for_relations(&Default::default(), DEFAULT_J_MAX));
    let res = GraphResources::default();
    let variant = GraphVariantConfig::named("wo_tp").unwrap();
    for s in &samples {
        let g = build_graph(s, &res, &variant, &vocab).unwrap();
        let a = encode_vertices(s, &g, &hashing, 2).unwrap().matrix;
        let b = encode_vertices(s, &g, &file, 2).unwrap().matrix;
        // Stored as f32.
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
    let other = HashingFeaturizer::new(12, 3).unwrap();
    let missing = vec![DialogSample { sample_id: "unknown".into(), ..samples[0].clone() }];
    let g = build_graph(&missing[0], &res, &variant, &vocab).unwrap();
    assert!(encode_vertices(&missing[0], &g, &file, 2).is_err());
    assert!(encode_vertices(&missing[0], &g, &other, 2).is_ok());
}

#[test]
fn embedding_file_dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"dim\":2,\"provider\":\"x\"}\n{\"sample\":\"s\",\"doc\":\"d\",\"cls\":0,\"vec\":[1.0]}\n",
    )
    .unwrap();
    let err = FileProvider::load(&path).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
}
