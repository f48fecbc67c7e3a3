//! Corpus data model and side resources (coreference chains, lemmas,
//! commonsense relations).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

pub mod synth;

pub use synth::{generate_synthetic_corpus, SynthSpec, SyntheticBundle};

/// A `(document, 1-based segment index)` reference.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub doc: String,
    pub sent: usize,
}

impl Label {
    pub fn new(doc: impl Into<String>, sent: usize) -> Self {
        Self {
            doc: doc.into(),
            sent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSegment {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub topic: String,
    pub segments: Vec<KnowledgeSegment>,
}

impl Document {
    /// Builds a document from its sentences, numbering them from 1.
    pub fn new<S: Into<String>>(
        doc_id: impl Into<String>,
        topic: impl Into<String>,
        sents: impl IntoIterator<Item = S>,
    ) -> Self {
        let doc_id = doc_id.into();
        let segments = sents
            .into_iter()
            .enumerate()
            .map(|(i, s)| KnowledgeSegment {
                doc_id: doc_id.clone(),
                index: i + 1,
                text: s.into(),
            })
            .collect();
        Self {
            doc_id,
            topic: topic.into(),
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segment by 1-based index.
    pub fn segment(&self, index: usize) -> Option<&KnowledgeSegment> {
        index.checked_sub(1).and_then(|i| self.segments.get(i))
    }

    fn validate(&self, sample: &str) -> Result<()> {
        let err = |field: &str, reason: String| Error::Schema {
            sample: sample.to_string(),
            field: format!("docs[{}].{field}", self.doc_id),
            reason,
        };
        if self.topic.trim().is_empty() {
            return Err(err("topic", "topic phrase is empty".into()));
        }
        if self.segments.is_empty() {
            return Err(err("sents", "document has no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.doc_id != self.doc_id {
                return Err(err("sents", format!("segment {} belongs to `{}`", i + 1, seg.doc_id)));
            }
            if seg.index != i + 1 {
                return Err(err("sents", format!("segment at position {} has index {}", i + 1, seg.index)));
            }
            if seg.text.trim().is_empty() {
                return Err(err("sents", format!("segment {} is empty", i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub utterance: String,
    pub gold: Option<Label>,
}

impl Turn {
    pub fn user(utterance: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            utterance: utterance.into(),
            gold: None,
        }
    }

    pub fn agent(utterance: impl Into<String>, gold: Option<Label>) -> Self {
        Self {
            role: Role::Agent,
            utterance: utterance.into(),
            gold,
        }
    }
}

/// One knowledge-selection instance: the dialog so far (ending with the
/// user's turn), its grounding documents, and the gold segment for the next
/// agent turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogSample {
    pub sample_id: String,
    pub turns: Vec<Turn>,
    pub documents: Vec<Document>,
    pub gold: Label,
}

impl DialogSample {
    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str, reason: &str| Error::Schema {
            sample: self.sample_id.clone(),
            field: field.into(),
            reason: reason.into(),
        };
        if self.turns.is_empty() {
            return Err(schema("turns", "dialog has no turns"));
        }
        if self.turns.last().map(|t| t.role) != Some(Role::User) {
            return Err(schema("turns", "final turn must be a user turn"));
        }
        if self.documents.is_empty() {
            return Err(schema("docs", "sample has no documents"));
        }
        let mut seen = BTreeSet::new();
        for doc in &self.documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(schema("docs", "duplicate document id"));
            }
            doc.validate(&self.sample_id)?;
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if let Some(gold) = &turn.gold {
                if turn.role == Role::User {
                    return Err(Error::Schema {
                        sample: self.sample_id.clone(),
                        field: format!("turns[{i}].gold"),
                        reason: "user turns cannot carry a gold label".into(),
                    });
                }
                self.check_label(gold)?;
            }
        }
        self.check_label(&self.gold)
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        if self.locate(label).is_none() {
            return Err(Error::DanglingReference {
                sample: self.sample_id.clone(),
                doc: label.doc.clone(),
                index: label.sent,
            });
        }
        Ok(())
    }

    /// `(document position, 0-based segment position)` of a label.
    pub fn locate(&self, label: &Label) -> Option<(usize, usize)> {
        let d = self.documents.iter().position(|d| d.doc_id == label.doc)?;
        let s = label.sent.checked_sub(1)?;
        (s < self.documents[d].len()).then_some((d, s))
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Gold labels of labeled agent turns, most recent first.
    pub fn agent_labels_newest_first(&self) -> impl Iterator<Item = &Label> {
        self.turns
            .iter()
            .rev()
            .filter(|t| t.role == Role::Agent)
            .filter_map(|t| t.gold.as_ref())
    }

    /// Agent turns (labeled or not), most recent first.
    pub fn agent_turns_newest_first(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().rev().filter(|t| t.role == Role::Agent)
    }

    /// Whether the gold transition stays within the document of the most
    /// recent labeled agent turn; `None` when there is no such turn.
    pub fn intra_topic(&self) -> Option<bool> {
        self.agent_labels_newest_first()
            .next()
            .map(|prev| prev.doc == self.gold.doc)
    }

    pub fn num_segments(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }
}

pub fn validate_corpus(samples: &[DialogSample]) -> Result<()> {
    samples.iter().try_for_each(DialogSample::validate)
}

/// Picks the segment with the highest unigram F1 against `response`; ties go
/// to the earliest document, then the lowest segment index.
pub fn induce_pseudo_gold(sample: &DialogSample, response: &str) -> Result<Label> {
    if response.trim().is_empty() {
        return Err(Error::Config("pseudo-gold induction needs a non-empty response".into()));
    }
    let mut best: Option<(f64, Label)> = None;
    for doc in &sample.documents {
        for seg in &doc.segments {
            let score = crate::eval::unigram_f1(&seg.text, response);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, Label::new(doc.doc_id.clone(), seg.index)));
            }
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| Error::Schema {
        sample: sample.sample_id.clone(),
        field: "docs".into(),
        reason: "no segments to choose from".into(),
    })
}

/// How a single grounding document is divided into pseudo-topic documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicSplit {
    /// Contiguous, near-equal chunks, one per name.
    Even { names: Vec<String> },
    /// Explicit category per segment, keyed by document id. Categories become
    /// topics in order of first appearance.
    Labeled { categories: BTreeMap<String, Vec<String>> },
}

impl Default for TopicSplit {
    fn default() -> Self {
        TopicSplit::Even {
            names: ["plot", "comments", "review", "fact table"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Splits every document of `sample` into pseudo-topic documents and remaps
/// all labels. New ids are `<doc>#<category>`, new topics `<topic> <category>`.
pub fn split_pseudo_topics(sample: &DialogSample, split: &TopicSplit) -> Result<DialogSample> {
    let mut documents = Vec::new();
    let mut remap: BTreeMap<Label, Label> = BTreeMap::new();
    for doc in &sample.documents {
        let categories: Vec<String> = match split {
            TopicSplit::Even { names } => {
                if names.is_empty() {
                    return Err(Error::Config("even topic split needs at least one name".into()));
                }
                let parts = names.len().min(doc.len());
                (0..doc.len())
                    .map(|i| names[i * parts / doc.len()].clone())
                    .collect()
            }
            TopicSplit::Labeled { categories } => {
                let c = categories.get(&doc.doc_id).ok_or_else(|| Error::Schema {
                    sample: sample.sample_id.clone(),
                    field: format!("categories[{}]", doc.doc_id),
                    reason: "no category labels for document".into(),
                })?;
                if c.len() != doc.len() {
                    return Err(Error::Dimension {
                        context: "topic split categories",
                        expected: doc.len(),
                        actual: c.len(),
                    });
                }
                c.clone()
            }
        };
        let mut order: Vec<&str> = Vec::new();
        for c in &categories {
            if !order.contains(&c.as_str()) {
                order.push(c);
            }
        }
        for cat in order {
            let new_id = format!("{}#{}", doc.doc_id, cat);
            let mut sents = Vec::new();
            for (seg, c) in doc.segments.iter().zip(&categories) {
                if c == cat {
                    sents.push(seg.text.clone());
                    remap.insert(
                        Label::new(doc.doc_id.clone(), seg.index),
                        Label::new(new_id.clone(), sents.len()),
                    );
                }
            }
            documents.push(Document::new(new_id, format!("{} {}", doc.topic, cat), sents));
        }
    }
    let map = |l: &Label| {
        remap.get(l).cloned().ok_or_else(|| Error::DanglingReference {
            sample: sample.sample_id.clone(),
            doc: l.doc.clone(),
            index: l.sent,
        })
    };
    let turns = sample
        .turns
        .iter()
        .map(|t| {
            Ok(Turn {
                role: t.role,
                utterance: t.utterance.clone(),
                gold: t.gold.as_ref().map(map).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = DialogSample {
        sample_id: sample.sample_id.clone(),
        turns,
        documents,
        gold: map(&sample.gold)?,
    };
    out.validate()?;
    Ok(out)
}

/// A mention span inside one segment; `start..end` are byte offsets into the
/// segment text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorefAnnotation {
    pub doc_id: String,
    pub chains: Vec<Vec<Mention>>,
}

impl CorefAnnotation {
    /// Checks that every mention lies inside its segment and every chain has
    /// at least two mentions.
    pub fn validate(&self, doc: &Document) -> Result<()> {
        if doc.doc_id != self.doc_id {
            return Err(Error::Annotation(format!(
                "annotation for `{}` applied to document `{}`",
                self.doc_id, doc.doc_id
            )));
        }
        for (c, chain) in self.chains.iter().enumerate() {
            if chain.len() < 2 {
                return Err(Error::Annotation(format!(
                    "document `{}` chain {c} has fewer than two mentions",
                    self.doc_id
                )));
            }
            for m in chain {
                let seg = doc.segment(m.sent).ok_or_else(|| {
                    Error::Annotation(format!(
                        "document `{}` chain {c}: segment {} does not exist",
                        self.doc_id, m.sent
                    ))
                })?;
                if m.start >= m.end || m.end > seg.text.len() {
                    return Err(Error::Annotation(format!(
                        "document `{}` chain {c}: span {}..{} outside segment {} (length {})",
                        self.doc_id,
                        m.start,
                        m.end,
                        m.sent,
                        seg.text.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Coreference annotations keyed by document id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorefIndex {
    by_doc: BTreeMap<String, CorefAnnotation>,
}

impl CorefIndex {
    /// Indexes `annotations`. Every annotated document must appear in
    /// `known_docs`.
    pub fn new<'a>(
        annotations: impl IntoIterator<Item = CorefAnnotation>,
        known_docs: impl IntoIterator<Item = &'a Document>,
    ) -> Result<Self> {
        let docs: BTreeMap<&str, &Document> =
            known_docs.into_iter().map(|d| (d.doc_id.as_str(), d)).collect();
        let mut by_doc = BTreeMap::new();
        for ann in annotations {
            let doc = docs.get(ann.doc_id.as_str()).ok_or_else(|| {
                Error::Annotation(format!("annotation references unknown document `{}`", ann.doc_id))
            })?;
            ann.validate(doc)?;
            if by_doc.insert(ann.doc_id.clone(), ann).is_some() {
                return Err(Error::Annotation("duplicate annotation for a document".into()));
            }
        }
        Ok(Self { by_doc })
    }

    pub fn get(&self, doc_id: &str) -> Option<&CorefAnnotation> {
        self.by_doc.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.by_doc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_doc.is_empty()
    }

    pub fn annotations(&self) -> impl Iterator<Item = &CorefAnnotation> {
        self.by_doc.values()
    }
}

/// Deterministic stand-in for a coreference resolver: each capitalized,
/// non-stopword token that occurs in two or more segments becomes a chain of
/// all its occurrences.
pub fn fallback_coref(doc: &Document) -> CorefAnnotation {
    let mut mentions: BTreeMap<&str, Vec<Mention>> = BTreeMap::new();
    for seg in &doc.segments {
        for (start, word) in text::raw_words(&seg.text) {
            if text::is_capitalized(word) && !text::is_stopword(&word.to_lowercase()) {
                mentions.entry(word).or_default().push(Mention {
                    sent: seg.index,
                    start,
                    end: start + word.len(),
                });
            }
        }
    }
    let chains = mentions
        .into_values()
        .filter(|ms| {
            let segs: BTreeSet<usize> = ms.iter().map(|m| m.sent).collect();
            segs.len() >= 2
        })
        .collect();
    CorefAnnotation {
        doc_id: doc.doc_id.clone(),
        chains,
    }
}

/// Entities per segment: maximal runs of capitalized tokens with leading and
/// trailing stopwords (sentence-initial "The", "It", ...) trimmed.
pub fn fallback_entities(doc: &Document) -> Vec<BTreeSet<String>> {
    doc.segments
        .iter()
        .map(|seg| {
            let mut out = BTreeSet::new();
            let mut run: Vec<&str> = Vec::new();
            let mut flush = |run: &mut Vec<&str>| {
                let stop = |w: &&str| text::is_stopword(&w.to_lowercase());
                let start = run.iter().position(|w| !stop(w));
                let end = run.iter().rposition(|w| !stop(w));
                if let (Some(a), Some(b)) = (start, end) {
                    out.insert(run[a..=b].join(" ").to_lowercase());
                }
                run.clear();
            };
            for (_, word) in text::raw_words(&seg.text) {
                if text::is_capitalized(word) {
                    run.push(word);
                } else {
                    flush(&mut run);
                }
            }
            flush(&mut run);
            out
        })
        .collect()
}

pub const OTHERS: &str = "others";

/// Commonsense relations between topic phrases, with low-frequency relation
/// names folded into [`OTHERS`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTable {
    entries: BTreeMap<(String, String), String>,
    kept: BTreeSet<String>,
}

fn topic_key(topic: &str) -> String {
    text::tokenize(topic).join(" ")
}

impl RelationTable {
    /// Keeps the `keep_top` most frequent relation names (ties broken
    /// lexicographically). A pair listed with several relations keeps the
    /// most frequent one under the same ordering.
    pub fn build(raw: &[(String, String, String)], keep_top: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, _, r) in raw {
            *freq.entry(r.as_str()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = freq.iter().map(|(k, v)| (*k, *v)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let rank: BTreeMap<&str, usize> = ranked.iter().enumerate().map(|(i, (r, _))| (*r, i)).collect();
        let kept = ranked.iter().take(keep_top).map(|(r, _)| r.to_string()).collect();

        let mut entries: BTreeMap<(String, String), String> = BTreeMap::new();
        for (a, b, r) in raw {
            let key = (topic_key(a), topic_key(b));
            match entries.get(&key) {
                Some(existing) if rank[existing.as_str()] <= rank[r.as_str()] => {}
                _ => {
                    entries.insert(key, r.clone());
                }
            }
        }
        Self { entries, kept }
    }

    /// Relation type of the ordered pair, already folded: a kept relation
    /// name or [`OTHERS`].
    pub fn lookup(&self, from: &str, to: &str) -> Option<&str> {
        let raw = self.entries.get(&(topic_key(from), topic_key(to)))?;
        Some(if self.kept.contains(raw) { raw.as_str() } else { OTHERS })
    }

    pub fn kept_relations(&self) -> &BTreeSet<String> {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_relation_table(raw: &[(String, String, String)], keep_top: usize) -> RelationTable {
    RelationTable::build(raw, keep_top)
}

/// Token to lemma lookup; unknown tokens map to themselves, lowercased.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaTable {
    entries: BTreeMap<String, String>,
}

impl LemmaTable {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        let entries = pairs
            .into_iter()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(t, l)| (t.to_lowercase(), l.trim().to_lowercase()))
            .collect();
        Self { entries }
    }

    pub fn lemma(&self, token: &str) -> String {
        let t = token.to_lowercase();
        self.entries.get(&t).cloned().unwrap_or(t)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
