//! Deterministic synthetic corpora for desk-scale experiments.
//!
//! Two flavors come out of one seed:
//!
//! * **generic**: the final user turn echoes a few words of the gold segment
//!   and the gold topic, so selection is learnable from text overlap alone.
//! * **coref-discriminative**: the final user turn is uninformative; the gold
//!   segment is the unique segment sharing an annotated coreference chain with
//!   the previous agent turn's segment. Mentions are pronouns that every
//!   segment carries, so the chain is only visible through the annotation.
//!
//! Content words never repeat inside a sample, which keeps accidental overlap
//! between segments (and between utterances and non-gold segments) at zero.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_relation_table, CorefAnnotation, DialogSample, Document, LemmaTable, Label, Mention,
    RelationTable, Turn,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Training samples per flavor.
    pub train_samples: usize,
    /// Held-out samples per flavor.
    pub test_samples: usize,
    /// Upper bound on documents per sample.
    pub max_docs: usize,
    /// Upper bound on segments per document.
    pub max_segments: usize,
    /// Content words per segment.
    pub segment_words: usize,
    /// Relation names kept by the generated relation table.
    pub keep_relations: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_samples: 64,
            test_samples: 32,
            max_docs: 5,
            max_segments: 6,
            segment_words: 6,
            keep_relations: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBundle {
    pub generic_train: Vec<DialogSample>,
    pub generic_test: Vec<DialogSample>,
    pub coref_train: Vec<DialogSample>,
    pub coref_test: Vec<DialogSample>,
    pub annotations: Vec<CorefAnnotation>,
    pub raw_relations: Vec<(String, String, String)>,
    pub relations: RelationTable,
    pub lemmas: LemmaTable,
}

const PRONOUNS: &[&str] = &["it", "they", "she", "he"];
const RELATIONS: &[(&str, usize)] = &[
    ("subclass of", 12),
    ("part of", 8),
    ("instance of", 6),
    ("follows", 5),
    ("has part", 4),
    ("located in", 3),
    ("performer", 2),
    ("genre", 1),
    ("depicts", 1),
    ("inspired by", 1),
];

struct Vocab {
    content: Vec<String>,
    topic: Vec<String>,
    filler: Vec<String>,
}

impl Vocab {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let mut seen = BTreeSet::new();
        let mut words = Vec::new();
        while words.len() < 4000 + 400 + 400 {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            // plural forms of topic words must not collide with other words
            if seen.contains(&w) || w.ends_with('s') {
                continue;
            }
            seen.insert(w.clone());
            words.push(w);
        }
        let filler = words.split_off(4400);
        let topic = words.split_off(4000);
        Self {
            content: words,
            topic,
            filler,
        }
    }
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    vocab: &'a Vocab,
    spec: &'a SynthSpec,
    annotations: Vec<CorefAnnotation>,
    raw_relations: Vec<(String, String, String)>,
}

struct Segment {
    words: Vec<String>,
    text: String,
    mention: (usize, usize),
}

impl Builder<'_> {
    fn segment(&mut self, used: &mut BTreeSet<usize>) -> Segment {
        let mut words = Vec::with_capacity(self.spec.segment_words);
        while words.len() < self.spec.segment_words {
            let i = self.rng.gen_range(0..self.vocab.content.len());
            if used.insert(i) {
                words.push(self.vocab.content[i].clone());
            }
        }
        let pronoun = PRONOUNS[self.rng.gen_range(0..PRONOUNS.len())];
        let at = self.rng.gen_range(0..=words.len());
        let mut text = String::new();
        let mut mention = (0, 0);
        for (k, w) in words.iter().enumerate() {
            if k == at {
                mention = (text.len(), text.len() + pronoun.len());
                text.push_str(pronoun);
                text.push(' ');
            }
            text.push_str(w);
            text.push(' ');
        }
        if at == words.len() {
            mention = (text.len(), text.len() + pronoun.len());
            text.push_str(pronoun);
        } else {
            text.pop();
        }
        text.push('.');
        // capitalize the sentence start; spans keep their byte offsets
        let mut chars = text.chars();
        let first = chars.next().unwrap().to_uppercase().to_string();
        let text = first + chars.as_str();
        Segment {
            words,
            text,
            mention,
        }
    }

    fn topic_phrase(&mut self, siblings: &[String]) -> String {
        let mut len = self.rng.gen_range(1..=2);
        let mut words: Vec<String> = Vec::new();
        // a third of the topics reuse a word of an earlier topic in the sample
        if !siblings.is_empty() && self.rng.gen_bool(1.0 / 3.0) {
            let s = siblings.choose(&mut self.rng).unwrap();
            let w = s.split(' ').next().unwrap().trim_end_matches('s').to_string();
            words.push(w);
            len = 2;
        }
        while words.len() < len {
            let w = self.vocab.topic.choose(&mut self.rng).unwrap().clone();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        // plural surface forms, resolved through the lemma table
        for w in &mut words {
            if self.rng.gen_bool(0.3) {
                w.push('s');
            }
        }
        let phrase = words.join(" ");
        if siblings.contains(&phrase) {
            format!("{phrase} {}", self.vocab.topic.choose(&mut self.rng).unwrap())
        } else {
            phrase
        }
    }

    fn relations_for(&mut self, topics: &[String]) {
        let total: usize = RELATIONS.iter().map(|r| r.1).sum();
        for a in topics {
            for b in topics {
                if a != b && self.rng.gen_bool(0.2) {
                    let mut pick = self.rng.gen_range(0..total);
                    let mut name = RELATIONS[0].0;
                    for (r, w) in RELATIONS {
                        if pick < *w {
                            name = r;
                            break;
                        }
                        pick -= w;
                    }
                    self.raw_relations.push((a.clone(), b.clone(), name.to_string()));
                }
            }
        }
    }

    fn filler(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.vocab.filler.choose(&mut self.rng).unwrap().clone()).collect()
    }

    /// Pairs up `segments` (1-based) into two-mention chains.
    fn pair_chains(&mut self, mut segments: Vec<usize>, mentions: &[(usize, usize)]) -> Vec<Vec<Mention>> {
        segments.shuffle(&mut self.rng);
        segments
            .chunks_exact(2)
            .map(|pair| {
                pair.iter()
                    .map(|&s| Mention {
                        sent: s,
                        start: mentions[s - 1].0,
                        end: mentions[s - 1].1,
                    })
                    .collect()
            })
            .collect()
    }

    fn documents(
        &mut self,
        prefix: &str,
        counts: &[usize],
    ) -> (Vec<Document>, Vec<Vec<Segment>>) {
        let mut used = BTreeSet::new();
        let mut topics: Vec<String> = Vec::new();
        let mut docs = Vec::new();
        let mut segs = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            let topic = self.topic_phrase(&topics);
            topics.push(topic.clone());
            let s: Vec<Segment> = (0..n).map(|_| self.segment(&mut used)).collect();
            docs.push(Document::new(
                format!("{prefix}-d{}", k + 1),
                topic,
                s.iter().map(|x| x.text.clone()),
            ));
            segs.push(s);
        }
        self.relations_for(&topics);
        (docs, segs)
    }

    fn generic(&mut self, id: String) -> DialogSample {
        let n_docs = self.rng.gen_range(1..=self.spec.max_docs);
        let counts: Vec<usize> = (0..n_docs).map(|_| self.rng.gen_range(1..=self.spec.max_segments)).collect();
        let (docs, segs) = self.documents(&id, &counts);
        for (doc, s) in docs.iter().zip(&segs) {
            let mentions: Vec<_> = s.iter().map(|x| x.mention).collect();
            let chains = self.pair_chains((1..=doc.len()).collect(), &mentions);
            if !chains.is_empty() {
                self.annotations.push(CorefAnnotation {
                    doc_id: doc.doc_id.clone(),
                    chains,
                });
            }
        }
        let pick = |rng: &mut ChaCha8Rng| {
            let d = rng.gen_range(0..docs.len());
            (d, rng.gen_range(0..docs[d].len()))
        };
        let mut turns = Vec::new();
        let mut prev = None;
        for _ in 0..self.rng.gen_range(0..=3) {
            turns.push(Turn::user(self.filler(4).join(" ")));
            let (d, s) = pick(&mut self.rng);
            let words = &segs[d][s].words;
            turns.push(Turn::agent(
                words[..words.len() - 1].join(" "),
                Some(Label::new(docs[d].doc_id.clone(), s + 1)),
            ));
            prev = Some((d, s));
        }
        let (gd, gs) = match prev {
            Some((d, s)) if self.rng.gen_bool(0.5) && docs[d].len() > 1 => {
                let mut g = self.rng.gen_range(0..docs[d].len() - 1);
                if g >= s {
                    g += 1;
                }
                (d, g)
            }
            _ => pick(&mut self.rng),
        };
        let mut words = self.filler(3);
        words.push(docs[gd].topic.split(' ').next().unwrap().to_string());
        let gold_words = &segs[gd][gs].words;
        words.extend(gold_words.choose_multiple(&mut self.rng, 2).cloned());
        words.shuffle(&mut self.rng);
        turns.push(Turn::user(words.join(" ")));
        DialogSample {
            sample_id: id,
            turns,
            gold: Label::new(docs[gd].doc_id.clone(), gs + 1),
            documents: docs,
        }
    }

    fn coref(&mut self, id: String) -> Option<DialogSample> {
        if self.spec.max_segments < 3 {
            return None;
        }
        let n_docs = self.rng.gen_range(1..=self.spec.max_docs);
        let gd = self.rng.gen_range(0..n_docs);
        let counts: Vec<usize> = (0..n_docs)
            .map(|d| {
                let lo = if d == gd { 3 } else { 1 };
                self.rng.gen_range(lo..=self.spec.max_segments)
            })
            .collect();
        let (docs, segs) = self.documents(&id, &counts);
        let n = docs[gd].len();
        let prev = self.rng.gen_range(0..n);
        let mut gold = self.rng.gen_range(0..n - 1);
        if gold >= prev {
            gold += 1;
        }
        for (d, (doc, s)) in docs.iter().zip(&segs).enumerate() {
            let mentions: Vec<_> = s.iter().map(|x| x.mention).collect();
            let mut chains = Vec::new();
            let mut rest: Vec<usize> = (1..=doc.len()).collect();
            if d == gd {
                rest.retain(|&x| x != prev + 1 && x != gold + 1);
                let mut pair = [prev + 1, gold + 1];
                pair.shuffle(&mut self.rng);
                chains.push(
                    pair.iter()
                        .map(|&x| Mention {
                            sent: x,
                            start: mentions[x - 1].0,
                            end: mentions[x - 1].1,
                        })
                        .collect(),
                );
            }
            chains.extend(self.pair_chains(rest, &mentions));
            chains.shuffle(&mut self.rng);
            if !chains.is_empty() {
                self.annotations.push(CorefAnnotation {
                    doc_id: doc.doc_id.clone(),
                    chains,
                });
            }
        }
        let words = &segs[gd][prev].words;
        let turns = alloc::vec![
            Turn::user(self.filler(4).join(" ")),
            Turn::agent(
                words[..words.len() - 1].join(" "),
                Some(Label::new(docs[gd].doc_id.clone(), prev + 1)),
            ),
            Turn::user(self.filler(5).join(" ")),
        ];
        Some(DialogSample {
            sample_id: id,
            turns,
            gold: Label::new(docs[gd].doc_id.clone(), gold + 1),
            documents: docs,
        })
    }
}

/// Generates both corpus flavors, their coreference annotations, a raw
/// relation list (and the folded table) and a lemma table. Identical seeds
/// give identical bundles.
pub fn generate_synthetic_corpus(seed: u64, spec: &SynthSpec) -> SyntheticBundle {
    let spec = SynthSpec {
        max_docs: spec.max_docs.max(1),
        max_segments: spec.max_segments.max(1),
        segment_words: spec.segment_words.max(2),
        ..spec.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(&mut rng);
    let mut b = Builder {
        rng,
        vocab: &vocab,
        spec: &spec,
        annotations: Vec::new(),
        raw_relations: Vec::new(),
    };
    let generic_train = (0..spec.train_samples).map(|i| b.generic(format!("g-train-{i:04}"))).collect();
    let generic_test = (0..spec.test_samples).map(|i| b.generic(format!("g-test-{i:04}"))).collect();
    let coref_train = (0..spec.train_samples).filter_map(|i| b.coref(format!("c-train-{i:04}"))).collect();
    let coref_test = (0..spec.test_samples).filter_map(|i| b.coref(format!("c-test-{i:04}"))).collect();

    let relations = build_relation_table(&b.raw_relations, spec.keep_relations);
    let lemmas = LemmaTable::new(vocab.topic.iter().map(|w| (format!("{w}s"), w.clone())));
    SyntheticBundle {
        generic_train,
        generic_test,
        coref_train,
        coref_test,
        annotations: b.annotations,
        raw_relations: b.raw_relations,
        relations,
        lemmas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorefIndex;

    fn small() -> SynthSpec {
        SynthSpec {
            train_samples: 24,
            test_samples: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(generate_synthetic_corpus(7, &small()), generate_synthetic_corpus(7, &small()));
        assert_ne!(
            generate_synthetic_corpus(7, &small()).generic_train,
            generate_synthetic_corpus(8, &small()).generic_train
        );
    }

    #[test]
    fn all_samples_valid_and_annotations_index() {
        let b = generate_synthetic_corpus(3, &small());
        let all: Vec<&DialogSample> = b
            .generic_train
            .iter()
            .chain(&b.generic_test)
            .chain(&b.coref_train)
            .chain(&b.coref_test)
            .collect();
        for s in &all {
            s.validate().unwrap();
            assert!(s.documents.len() <= 5);
            assert!(s.documents.iter().all(|d| d.len() <= 6));
        }
        CorefIndex::new(b.annotations.clone(), all.iter().flat_map(|s| &s.documents)).unwrap();
    }

    #[test]
    fn single_segment_boundary() {
        let spec = SynthSpec {
            max_docs: 1,
            max_segments: 1,
            ..small()
        };
        let b = generate_synthetic_corpus(1, &spec);
        assert!(b.generic_train.iter().all(|s| s.num_segments() == 1));
        assert!(b.coref_train.is_empty());
    }

    #[test]
    fn coref_flavor_has_unique_chain_partner() {
        let b = generate_synthetic_corpus(11, &small());
        let index = CorefIndex::new(
            b.annotations.clone(),
            b.generic_train
                .iter()
                .chain(&b.generic_test)
                .chain(&b.coref_train)
                .chain(&b.coref_test)
                .flat_map(|s| &s.documents),
        )
        .unwrap();
        assert_eq!(b.coref_train.len(), 24);
        for s in b.coref_train.iter().chain(&b.coref_test) {
            let prev = s.agent_labels_newest_first().next().unwrap();
            assert_eq!(prev.doc, s.gold.doc);
            // exhaustive traversal: every segment sharing any chain with prev
            let mut partners = BTreeSet::new();
            for doc in &s.documents {
                let Some(ann) = index.get(&doc.doc_id) else { continue };
                for chain in &ann.chains {
                    let segs: BTreeSet<usize> = chain.iter().map(|m| m.sent).collect();
                    if doc.doc_id == prev.doc && segs.contains(&prev.sent) {
                        partners.extend(segs.into_iter().filter(|&x| x != prev.sent).map(|x| (doc.doc_id.clone(), x)));
                    }
                }
            }
            assert_eq!(partners.len(), 1, "sample {}", s.sample_id);
            assert!(partners.contains(&(s.gold.doc.clone(), s.gold.sent)));
        }
    }

    #[test]
    fn mention_spans_cover_pronouns() {
        let b = generate_synthetic_corpus(5, &small());
        let docs: Vec<&Document> = b.coref_train.iter().flat_map(|s| &s.documents).collect();
        for ann in &b.annotations {
            let Some(doc) = docs.iter().find(|d| d.doc_id == ann.doc_id) else { continue };
            for m in ann.chains.iter().flatten() {
                let t = &doc.segment(m.sent).unwrap().text[m.start..m.end];
                assert!(PRONOUNS.contains(&t.to_lowercase().as_str()), "{t}");
            }
        }
    }
}
