//! CSV, JSON and text renderings of metrics, graph statistics and traces.

use std::path::Path;

use corefdiffs_core::eval::{AblationRow, PredictionRecord, SplitReport};
use corefdiffs_core::graph::{GraphStats, StatFamily};
use corefdiffs_core::trainer::TraceRecord;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_text;

/// Tokenization used by uF1/bF1, stated in every report for comparability.
pub const TOKENIZATION: &str = "lowercase; split on every non-alphanumeric character";

/// Full-scale reference figures (knowledge/topic accuracy, %, on the seen
/// test split). Shown for context only; desk-scale runs are not comparable.
pub const REFERENCE_ROWS: &[(&str, f64, Option<f64>)] = &[("full", 42.4, Some(76.1)), ("wo_kg", 35.4, None)];

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_else(|| "NA".into())
}

fn csv_string(build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const SPLIT_HEADER: [&str; 7] = ["kl", "tp", "in_tp", "n_samples", "n_intra_topic", "uf1", "bf1"];

fn split_fields(r: &SplitReport) -> Vec<String> {
    let s = &r.selection;
    vec![
        pct(s.kl),
        pct(s.tp),
        opt_pct(s.in_tp),
        s.n_samples.to_string(),
        s.n_intra_topic.to_string(),
        opt_pct(r.uf1),
        opt_pct(r.bf1),
    ]
}

/// One CSV row per `(variant, ablation, split)`; metrics in percent.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["variant", "ablation", "seed", "split"];
        header.extend(SPLIT_HEADER);
        header.push("error");
        w.write_record(&header)?;
        for r in rows {
            let lead = [r.variant.clone(), r.ablation.clone(), r.seed.to_string()];
            if r.splits.is_empty() {
                let mut rec: Vec<String> = lead.to_vec();
                rec.push(String::new());
                rec.extend(SPLIT_HEADER.iter().map(|_| String::new()));
                rec.push(r.error.clone().unwrap_or_default());
                w.write_record(&rec)?;
            }
            for (split, rep) in &r.splits {
                let mut rec: Vec<String> = lead.to_vec();
                rec.push(split.clone());
                rec.extend(split_fields(rep));
                rec.push(r.error.clone().unwrap_or_default());
                w.write_record(&rec)?;
            }
        }
        Ok(())
    })
}

pub fn splits_csv<'a>(splits: impl IntoIterator<Item = (&'a String, &'a SplitReport)>) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["split"];
        header.extend(SPLIT_HEADER);
        w.write_record(&header)?;
        for (name, rep) in splits {
            let mut rec = vec![name.clone()];
            rec.extend(split_fields(rep));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Plain-text table for the terminal.
pub fn ablation_table(rows: &[AblationRow], split: &str) -> String {
    let mut s = format!("{:<16} {:<12} {:>6} {:>7} {:>7} {:>7}\n", "variant", "ablation", "seed", "KL", "TP", "In-TP");
    for r in rows {
        match (&r.error, r.splits.get(split)) {
            (Some(e), _) => s += &format!("{:<16} {:<12} {:>6} error: {e}\n", r.variant, r.ablation, r.seed),
            (None, Some(rep)) => {
                let m = &rep.selection;
                s += &format!(
                    "{:<16} {:<12} {:>6} {:>7} {:>7} {:>7}\n",
                    r.variant,
                    r.ablation,
                    r.seed,
                    pct(m.kl),
                    pct(m.tp),
                    opt_pct(m.in_tp)
                );
            }
            (None, None) => s += &format!("{:<16} {:<12} {:>6} (no {split} split)\n", r.variant, r.ablation, r.seed),
        }
    }
    s += "reference, full scale (seen split): ";
    let refs: Vec<String> = REFERENCE_ROWS
        .iter()
        .map(|(v, kl, tp)| match tp {
            Some(tp) => format!("{v} KL {kl} TP {tp}"),
            None => format!("{v} KL {kl}"),
        })
        .collect();
    s += &refs.join("; ");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Reference {
    variant: &'static str,
    kl: f64,
    tp: Option<f64>,
}

#[derive(Serialize)]
struct AblationJson<'a> {
    tokenization: &'static str,
    rows: &'a [AblationRow],
    reference_full_scale: Vec<Reference>,
}

pub fn ablation_json(rows: &[AblationRow]) -> String {
    let r = AblationJson {
        tokenization: TOKENIZATION,
        rows,
        reference_full_scale: REFERENCE_ROWS
            .iter()
            .map(|&(variant, kl, tp)| Reference { variant, kl, tp })
            .collect(),
    };
    serde_json::to_string_pretty(&r).expect("report serializes") + "\n"
}

/// One row per variant; columns are the mean counts.
pub fn graph_stats_csv(stats: &[(String, GraphStats)]) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["variant", "samples", "topics", "knowledge"];
        header.extend(StatFamily::ALL.iter().map(|f| f.as_str()));
        w.write_record(&header)?;
        for (name, st) in stats {
            let mut rec = vec![
                name.clone(),
                st.samples.to_string(),
                format!("{:.4}", st.mean_topics),
                format!("{:.4}", st.mean_knowledge),
            ];
            rec.extend(StatFamily::ALL.iter().map(|&f| format!("{:.4}", st.family(f))));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s += &serde_json::to_string(it).expect("record serializes");
        s.push('\n');
    }
    s
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_text(path, &jsonl(trace))
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_text(path, &jsonl(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use corefdiffs_core::eval::SelectionMetrics;
    use std::collections::BTreeMap;

    fn row(variant: &str, kl: f64, error: Option<&str>) -> AblationRow {
        let mut splits = BTreeMap::new();
        if error.is_none() {
            let m = SelectionMetrics {
                kl,
                tp: 1.0,
                in_tp: None,
                n_samples: 4,
                n_intra_topic: 0,
            };
            splits.insert("test".to_string(), SplitReport::from(m));
        }
        AblationRow {
            variant: variant.into(),
            ablation: "none".into(),
            seed: 0,
            splits,
            error: error.map(str::to_string),
        }
    }

    #[test]
    fn csv_has_one_line_per_row_and_split() {
        let csv = ablation_csv(&[row("full", 0.5, None), row("wo_kg", 0.0, Some("boom"))]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("full,none,0,test,50.00,100.00,NA,4,0,NA,NA,"));
        assert!(lines[2].ends_with("boom"));
    }

    #[test]
    fn table_mentions_reference() {
        let t = ablation_table(&[row("full", 0.25, None)], "test");
        assert!(t.contains("25.00") && t.contains("KL 42.4"));
    }
}
