use std::sync::Arc;

use corefdiffs::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use corefdiffs_core::corpus::{generate_synthetic_corpus, CorefIndex, SynthSpec};
use corefdiffs_core::encoder::HashingFeaturizer;
use corefdiffs_core::graph::{EdgeVocab, GraphResources, DEFAULT_J_MAX};
use corefdiffs_core::trainer::{prepare_corpus, train, Pipeline, PreparedSample, TrainConfig, TrainOutcome};

fn trained() -> (TrainConfig, Arc<EdgeVocab>, Vec<PreparedSample>, TrainOutcome) {
    let b = generate_synthetic_corpus(4, &SynthSpec { train_samples: 6, test_samples: 2, ..SynthSpec::default() });
    let docs = b.coref_train.iter().flat_map(|s| &s.documents);
    let resources = GraphResources {
        coref: CorefIndex::new(b.annotations.iter().filter(|a| b.coref_train.iter().any(|s| s.document(&a.doc_id).is_some())).cloned(), docs).unwrap(),
        relations: b.relations.clone(),
        lemmas: b.lemmas.clone(),
        ..GraphResources::default()
    };
    let vocab = Arc::new(EdgeVocab::for_relations(&b.relations, DEFAULT_J_MAX));
    let mut c = TrainConfig::default();
    c.model.d_init = 8;
    c.model.d_g = 8;
    c.model.d_e = 4;
    c.model.heads = 2;
    c.model.history = 2;
    c.epochs = 2;
    let provider = HashingFeaturizer::new(8, 0).unwrap();
    let pipeline = Pipeline { resources: &resources, vocab: &vocab, provider: &provider };
    let data = prepare_corpus(&b.coref_train, pipeline, &c.variant, &c.model).unwrap();
    let out = train(&c, &vocab, &data, None).unwrap();
    (c, vocab, data, out)
}

#[test]
fn round_trip_is_bitwise() {
    let (c, vocab, data, out) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/last.ckpt");
    save_checkpoint(&path, &out.last, &c).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.checkpoint, out.last);
    assert_eq!(back.train_config, c);
    back.check_compatible(&vocab, Some(&c.model)).unwrap();
    for s in &data {
        let a = out.last.model.forward(&s.topology, &s.h0, &s.targets.history).unwrap();
        let b = back.checkpoint.model.forward(&s.topology, &s.h0, &s.targets.history).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(encode_checkpoint(&back.checkpoint, &back.train_config), std::fs::read(&path).unwrap());
}

#[test]
fn mismatched_vocabulary_or_dimensions_are_rejected() {
    let (c, vocab, _, out) = trained();
    let stored = decode_checkpoint(&encode_checkpoint(&out.best, &c)).unwrap();
    let smaller = EdgeVocab::new([], DEFAULT_J_MAX);
    assert!(stored.check_compatible(&smaller, None).is_err());
    let mut wider = c.model.clone();
    wider.d_g = 16;
    assert!(stored.check_compatible(&vocab, Some(&wider)).is_err());
}

#[test]
fn damaged_files_are_rejected() {
    let (c, _, _, out) = trained();
    let bytes = encode_checkpoint(&out.last, &c);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).unwrap_err().contains("truncated"));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).unwrap_err().contains("trailing"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_checkpoint(&magic).unwrap_err().contains("magic"));
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_checkpoint(&version).unwrap_err().contains("version"));
}
