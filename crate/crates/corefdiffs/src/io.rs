//! Corpus JSON, coreference annotations and the TSV side tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use corefdiffs_core::corpus::{
    induce_pseudo_gold, split_pseudo_topics, CorefAnnotation, DialogSample, Document, Label,
    LemmaTable, Mention, Role, TopicSplit, Turn,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// How the documents of a corpus file are shaped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSchema {
    /// Several topical documents per sample, used as they are.
    #[default]
    MultiDoc,
    /// One document per sample, divided into pseudo-topics on load.
    SingleDoc { split: TopicSplit },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    samples: Vec<Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    turns: Vec<TurnRecord>,
    docs: Vec<DocRecord>,
    /// Absent in unlabeled corpora; then `response` picks a pseudo-gold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    role: Role,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Label>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    id: String,
    topic: String,
    sents: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

fn sample_from_record(r: SampleRecord) -> corefdiffs_core::Result<DialogSample> {
    let documents: Vec<Document> = r
        .docs
        .into_iter()
        .map(|d| Document::new(d.id, d.topic, d.sents))
        .collect();
    let turns = r
        .turns
        .into_iter()
        .map(|t| Turn {
            role: t.role,
            utterance: t.text,
            gold: t.gold,
        })
        .collect();
    let mut sample = DialogSample {
        sample_id: r.id,
        turns,
        documents,
        gold: Label::new("", 0),
    };
    sample.gold = match (r.gold, r.response) {
        (Some(g), _) => g,
        (None, Some(resp)) if !resp.trim().is_empty() => induce_pseudo_gold(&sample, &resp)?,
        _ => {
            return Err(corefdiffs_core::Error::Schema {
                sample: sample.sample_id,
                field: "gold".into(),
                reason: "missing gold label and no response to induce one from".into(),
            })
        }
    };
    Ok(sample)
}

fn record_from_sample(s: &DialogSample) -> SampleRecord {
    SampleRecord {
        id: s.sample_id.clone(),
        turns: s
            .turns
            .iter()
            .map(|t| TurnRecord {
                role: t.role,
                text: t.utterance.clone(),
                gold: t.gold.clone(),
            })
            .collect(),
        docs: s
            .documents
            .iter()
            .map(|d| DocRecord {
                id: d.doc_id.clone(),
                topic: d.topic.clone(),
                sents: d.segments.iter().map(|k| k.text.clone()).collect(),
            })
            .collect(),
        gold: Some(s.gold.clone()),
        response: None,
    }
}

/// Parses corpus JSON text. Every sample is validated; errors name the
/// sample and the offending field.
pub fn parse_corpus(text: &str, schema: &CorpusSchema) -> std::result::Result<Vec<DialogSample>, ParseError> {
    let file: CorpusFile = serde_json::from_str(text).map_err(ParseError::Json)?;
    let mut out = Vec::with_capacity(file.samples.len());
    for (i, v) in file.samples.into_iter().enumerate() {
        let id = v
            .get("id")
            .and_then(Value::as_str)
            .map_or_else(|| format!("#{i}"), str::to_string);
        let record: SampleRecord = serde_json::from_value(v).map_err(|e| {
            ParseError::Core(corefdiffs_core::Error::Schema {
                sample: id.clone(),
                field: format!("samples[{i}]"),
                reason: e.to_string(),
            })
        })?;
        let mut sample = sample_from_record(record).map_err(ParseError::Core)?;
        sample.validate().map_err(ParseError::Core)?;
        if let CorpusSchema::SingleDoc { split } = schema {
            sample = split_pseudo_topics(&sample, split).map_err(ParseError::Core)?;
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error(transparent)]
    Json(serde_json::Error),
    #[error(transparent)]
    Core(corefdiffs_core::Error),
}

pub fn load_corpus(path: &Path, schema: &CorpusSchema) -> Result<Vec<DialogSample>> {
    parse_corpus(&read(path)?, schema).map_err(|e| match e {
        ParseError::Json(source) => Error::Json {
            path: path.into(),
            source,
        },
        ParseError::Core(e) => e.into(),
    })
}

pub fn corpus_to_json(samples: &[DialogSample]) -> String {
    #[derive(Serialize)]
    struct Out {
        samples: Vec<SampleRecord>,
    }
    let out = Out {
        samples: samples.iter().map(record_from_sample).collect(),
    };
    serde_json::to_string_pretty(&out).expect("corpus serializes")
}

pub fn save_corpus(path: &Path, samples: &[DialogSample]) -> Result<()> {
    write_text(path, &(corpus_to_json(samples) + "\n"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorefRecord {
    doc: String,
    chains: Vec<Vec<Mention>>,
}

/// Coreference file: a JSON array of `{doc, chains: [[{sent, start, end}]]}`.
pub fn load_coref(path: &Path) -> Result<Vec<CorefAnnotation>> {
    let records: Vec<CorefRecord> = serde_json::from_str(&read(path)?).map_err(Error::json(path))?;
    Ok(records
        .into_iter()
        .map(|r| CorefAnnotation {
            doc_id: r.doc,
            chains: r.chains,
        })
        .collect())
}

pub fn save_coref(path: &Path, annotations: &[CorefAnnotation]) -> Result<()> {
    let records: Vec<CorefRecord> = annotations
        .iter()
        .map(|a| CorefRecord {
            doc: a.doc_id.clone(),
            chains: a.chains.clone(),
        })
        .collect();
    write_text(path, &(serde_json::to_string_pretty(&records).expect("coref serializes") + "\n"))
}

/// Entity file: `{doc_id: [[entity, ...] per segment]}`. Entities are
/// compared lowercased.
pub fn load_entities(path: &Path) -> Result<BTreeMap<String, Vec<BTreeSet<String>>>> {
    let raw: BTreeMap<String, Vec<Vec<String>>> = read_json(path)?;
    Ok(raw
        .into_iter()
        .map(|(doc, segs)| {
            let segs = segs
                .into_iter()
                .map(|es| es.iter().map(|e| e.trim().to_lowercase()).collect())
                .collect();
            (doc, segs)
        })
        .collect())
}

fn tsv_rows(path: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(|f| f.trim().to_string()).collect();
        if fields.len() != columns || fields.iter().any(String::is_empty) {
            return Err(Error::Format {
                path: path.into(),
                line: i + 1,
                reason: format!("expected {columns} non-empty tab-separated fields"),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// `topic_a \t topic_b \t relation` rows.
pub fn load_relations(path: &Path) -> Result<Vec<(String, String, String)>> {
    Ok(tsv_rows(path, 3)?
        .into_iter()
        .map(|mut r| {
            let rel = r.pop().unwrap();
            let b = r.pop().unwrap();
            let a = r.pop().unwrap();
            (a, b, rel)
        })
        .collect())
}

pub fn save_relations(path: &Path, raw: &[(String, String, String)]) -> Result<()> {
    let mut s = String::new();
    for (a, b, r) in raw {
        s.push_str(&format!("{a}\t{b}\t{r}\n"));
    }
    write_text(path, &s)
}

/// `token \t lemma` rows.
pub fn load_lemmas(path: &Path) -> Result<LemmaTable> {
    Ok(LemmaTable::new(tsv_rows(path, 2)?.into_iter().map(|mut r| {
        let lemma = r.pop().unwrap();
        (r.pop().unwrap(), lemma)
    })))
}

pub fn save_lemmas(path: &Path, table: &LemmaTable) -> Result<()> {
    let mut s = String::new();
    for (t, l) in table.entries() {
        s.push_str(&format!("{t}\t{l}\n"));
    }
    write_text(path, &s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let f = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes()).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    write_text(path, &(s + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(Error::json(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"samples":[{"id":"s1","turns":[{"role":"user","text":"hi"}],
        "docs":[{"id":"d","topic":"t","sents":["one sentence"]}],"gold":{"doc":"d","sent":1}}]}"#;

    #[test]
    fn minimal_file_loads() {
        let s = parse_corpus(MINIMAL, &CorpusSchema::MultiDoc).unwrap();
        assert_eq!((s.len(), s[0].documents.len()), (1, 1));
    }

    #[test]
    fn dangling_gold_is_named() {
        let bad = MINIMAL.replace(r#""sent":1"#, r#""sent":4"#);
        let ParseError::Core(e) = parse_corpus(&bad, &CorpusSchema::MultiDoc).unwrap_err() else {
            panic!("expected core error")
        };
        let msg = e.to_string();
        assert!(msg.contains("s1") && msg.contains('4'), "{msg}");
    }

    #[test]
    fn schema_errors_name_sample_and_field() {
        let bad = MINIMAL.replace(r#""topic":"t","#, "");
        let ParseError::Core(e) = parse_corpus(&bad, &CorpusSchema::MultiDoc).unwrap_err() else {
            panic!("expected core error")
        };
        let msg = e.to_string();
        assert!(msg.contains("s1") && msg.contains("topic"), "{msg}");
    }

    #[test]
    fn response_induces_gold() {
        let text = r#"{"samples":[{"id":"s","turns":[{"role":"user","text":"hi"}],
            "docs":[{"id":"d","topic":"t","sents":["red apples","green pears grow"]}],
            "response":"pears grow slowly"}]}"#;
        let s = parse_corpus(text, &CorpusSchema::MultiDoc).unwrap();
        assert_eq!(s[0].gold, Label::new("d", 2));
    }

    #[test]
    fn single_doc_schema_splits() {
        let text = r#"{"samples":[{"id":"s","turns":[{"role":"user","text":"hi"}],
            "docs":[{"id":"m","topic":"film","sents":["a","b","c","d","e","f","g","h"]}],
            "gold":{"doc":"m","sent":6}}]}"#;
        let s = parse_corpus(text, &CorpusSchema::SingleDoc { split: TopicSplit::default() }).unwrap();
        assert_eq!(s[0].documents.len(), 4);
        assert_eq!(s[0].gold, Label::new("m#review", 2));
    }
}
